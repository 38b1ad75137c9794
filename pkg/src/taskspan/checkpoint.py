"""Self-describing binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..7    magic  b"TSKSPAN\\x01"
    bytes 8..15   uint64 header length H
    bytes 16..    UTF-8 JSON header of H bytes, sorted keys:
                    {"format_version": 1,
                     "meta":   {...scalar fields...},
                     "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    then          raw array payloads at the stated offsets (relative to the
                  end of the header), every array little-endian float64 in
                  row-major order

Arrays are stored in sorted-name order and the header is serialized with
sorted keys, so identical state produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSKSPAN\x01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save(path, meta: dict, arrays: dict) -> None:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
        blob = arr.astype("<f8", copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": "<f8",
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        payloads.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        arr = np.frombuffer(data[lo:hi], dtype=entry["dtype"]).astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# agent-level serialization


def _layer_plan(agent) -> list:
    return [[l.name, l.d_in, l.d_out, l.net, l.kind, bool(l.compositional)]
            for l in agent.all_layers]


def agent_meta(agent) -> dict:
    return {
        "k": agent.k,
        "n": agent.phi.n,
        "task_count": agent.task_count,
        "obs_dim": agent.obs_dim,
        "act_dim": agent.act_dim,
        "hidden": list(agent.hidden),
        "scope": agent.scope,
        "normalize_w": agent.w.normalize,
        "w_init": agent.w_init_mode,
        "lr": agent.lr,
        "gamma": agent.gamma,
        "polyak": agent.rho,
        "target_entropy": agent.target_entropy,
        "init_log_alpha": agent.init_log_alpha,
        "layer_plan": _layer_plan(agent),
        "phi_trainable": agent.phi.trainable,
        "w_trainable": list(agent.w_trainable),
    }


def _opt_arrays(prefix: str, opt) -> dict:
    state = opt.state_arrays()
    return {f"{prefix}/m": state["m"], f"{prefix}/v": state["v"], f"{prefix}/t": state["t"]}


def save_agent(path, agent, extra_meta: dict = None) -> None:
    arrays = {
        "phi": agent.phi.data,
        "w": np.stack([agent.w.raw(t) for t in range(agent.task_count)]),
        "log_alpha": np.array([agent.log_alpha[t].data for t in range(agent.task_count)]),
    }
    arrays.update(_opt_arrays("opt/phi", agent.phi_opt))
    for t in range(agent.task_count):
        arrays[f"target1/{t}"] = agent.target1[t]
        arrays[f"target2/{t}"] = agent.target2[t]
        arrays.update(_opt_arrays(f"opt/w/{t}", agent.w_opts[t]))
        arrays.update(_opt_arrays(f"opt/alpha/{t}", agent.alpha_opts[t]))
    for name, pl in agent.plain.items():
        arrays[f"plain/{name}/weight"] = pl.weight.data
        arrays[f"plain/{name}/bias"] = pl.bias.data
        w_opt, b_opt = agent.plain_opts[name]
        arrays.update(_opt_arrays(f"opt/plain/{name}/weight", w_opt))
        arrays.update(_opt_arrays(f"opt/plain/{name}/bias", b_opt))
    meta = agent_meta(agent)
    if extra_meta:
        meta = {**meta, **extra_meta}
    save(path, meta, arrays)


def load_agent(path):
    """Rebuild a SacAgent from a checkpoint; returns (agent, meta)."""
    from .sac import SacAgent

    meta, arrays = load(path)
    agent = SacAgent(
        obs_dim=int(meta["obs_dim"]),
        act_dim=int(meta["act_dim"]),
        task_count=int(meta["task_count"]),
        k=int(meta["k"]),
        hidden=tuple(meta["hidden"]),
        scope=meta["scope"],
        normalize_w=bool(meta["normalize_w"]),
        w_init="random",
        seed=0,
        lr=float(meta["lr"]),
        gamma=float(meta["gamma"]),
        polyak=float(meta["polyak"]),
        target_entropy=float(meta["target_entropy"]),
        init_log_alpha=float(meta["init_log_alpha"]),
    )
    agent.phi.data[...] = arrays["phi"]
    for t in range(agent.task_count):
        agent.w.set_raw(t, arrays["w"][t])
        agent.log_alpha[t].data[...] = arrays["log_alpha"][t]
        agent.target1[t][...] = arrays[f"target1/{t}"]
        agent.target2[t][...] = arrays[f"target2/{t}"]
        agent.w_opts[t].load_state_arrays({
            "m": arrays[f"opt/w/{t}/m"], "v": arrays[f"opt/w/{t}/v"],
            "t": arrays[f"opt/w/{t}/t"],
        })
        agent.alpha_opts[t].load_state_arrays({
            "m": arrays[f"opt/alpha/{t}/m"], "v": arrays[f"opt/alpha/{t}/v"],
            "t": arrays[f"opt/alpha/{t}/t"],
        })
    agent.phi_opt.load_state_arrays({
        "m": arrays["opt/phi/m"], "v": arrays["opt/phi/v"], "t": arrays["opt/phi/t"],
    })
    for name, pl in agent.plain.items():
        pl.weight.data[...] = arrays[f"plain/{name}/weight"]
        pl.bias.data[...] = arrays[f"plain/{name}/bias"]
        w_opt, b_opt = agent.plain_opts[name]
        w_opt.load_state_arrays({
            "m": arrays[f"opt/plain/{name}/weight/m"],
            "v": arrays[f"opt/plain/{name}/weight/v"],
            "t": arrays[f"opt/plain/{name}/weight/t"],
        })
        b_opt.load_state_arrays({
            "m": arrays[f"opt/plain/{name}/bias/m"],
            "v": arrays[f"opt/plain/{name}/bias/v"],
            "t": arrays[f"opt/plain/{name}/bias/t"],
        })
    agent.phi.trainable = bool(meta.get("phi_trainable", True))
    agent.w_trainable = [bool(x) for x in meta.get("w_trainable", [True] * agent.task_count)]
    agent.bump_version()
    return agent, meta
