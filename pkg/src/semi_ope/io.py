"""JSON / JSON-lines serialization. Every document carries ``format_version``."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .annotation import AnnotatedDataset
from .errors import ConfigError
from .mdp import Policy, TabularMDP, TrajectoryBatch

FORMAT_VERSION = 1


def _check_version(doc: dict, what: str) -> None:
    v = doc.get("format_version")
    if v != FORMAT_VERSION:
        raise ConfigError(f"unsupported format_version {v!r}", what)


def mdp_to_dict(mdp: TabularMDP) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "tabular_mdp",
        "name": mdp.name,
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "horizon": mdp.horizon,
        "discount": mdp.discount,
        "terminal_states": sorted(mdp.terminal_states),
        "initial_dist": mdp.initial_dist.tolist(),
        "reward_mean": mdp.reward_mean.tolist(),
        "reward_std": mdp.reward_std.tolist(),
        "transition": mdp.transition.tolist(),
    }


def mdp_from_dict(doc: dict) -> TabularMDP:
    _check_version(doc, "mdp")
    S, A = int(doc["num_states"]), int(doc["num_actions"])
    P = np.asarray(doc["transition"], dtype=float)
    if P.shape != (S, A, S):
        raise ConfigError(f"transition shape {P.shape} does not match ({S}, {A}, {S})", "mdp.transition")
    return TabularMDP(
        P, np.asarray(doc["reward_mean"]), np.asarray(doc["reward_std"]), np.asarray(doc["initial_dist"]),
        horizon=int(doc["horizon"]), discount=float(doc["discount"]),
        terminal_states=frozenset(doc.get("terminal_states", [])), name=doc.get("name", ""),
    )


def policy_to_dict(pi: Policy) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "policy",
        "name": pi.name,
        "num_states": pi.num_states,
        "num_actions": pi.num_actions,
        "probs": pi.probs.tolist(),
    }


def policy_from_dict(doc: dict) -> Policy:
    _check_version(doc, "policy")
    probs = np.asarray(doc["probs"], dtype=float)
    if probs.shape != (int(doc["num_states"]), int(doc["num_actions"])):
        raise ConfigError("probs shape does not match the declared dimensions", "policy.probs")
    return Policy(probs, name=doc.get("name", ""))


def write_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def trajectory_lines(batch: TrajectoryBatch, annotated: Optional[AnnotatedDataset] = None) -> list[str]:
    lines = []
    for i in range(batch.n):
        steps = []
        for t in range(int(batch.lengths[i])):
            step = {"s": int(batch.states[i, t]), "a": int(batch.actions[i, t]), "r": float(batch.rewards[i, t])}
            if annotated is not None:
                anns = []
                for a in range(annotated.num_actions):
                    if a == step["a"]:
                        continue
                    ok = bool(annotated.available[i, t, a])
                    anns.append({"action": a, "available": ok, "value": float(annotated.values[i, t, a]) if ok else None})
                step["annotations"] = anns
            steps.append(step)
        lines.append(json.dumps({"format_version": FORMAT_VERSION, "steps": steps}, sort_keys=True))
    return lines


def write_trajectories(path, batch: TrajectoryBatch, annotated: Optional[AnnotatedDataset] = None) -> None:
    Path(path).write_text("".join(line + "\n" for line in trajectory_lines(batch, annotated)))


def read_trajectories(path, num_actions: Optional[int] = None, horizon: Optional[int] = None):
    """Returns ``(batch, annotated)``; ``annotated`` is None when no step
    carries an ``annotations`` field."""
    docs = []
    with open(path) as fh:
        for k, line in enumerate(fh):
            if not line.strip():
                continue
            doc = json.loads(line)
            _check_version(doc, f"{path}:{k + 1}")
            docs.append(doc["steps"])
    n = len(docs)
    lengths = np.array([len(d) for d in docs], dtype=np.int64)
    T = int(horizon if horizon is not None else max(int(lengths.max(initial=0)), 1))
    S = np.zeros((n, T), dtype=np.int64)
    A = np.zeros((n, T), dtype=np.int64)
    R = np.zeros((n, T))
    has_ann = any("annotations" in st for d in docs for st in d)
    nA = num_actions
    if has_ann and nA is None:
        nA = 1 + max(
            [st["a"] for d in docs for st in d] + [an["action"] for d in docs for st in d for an in st.get("annotations", [])]
        )
    vals = np.zeros((n, T, nA or 1))
    avail = np.zeros((n, T, nA or 1), dtype=bool)
    for i, d in enumerate(docs):
        for t, st in enumerate(d):
            S[i, t], A[i, t], R[i, t] = st["s"], st["a"], st["r"]
            for an in st.get("annotations", []):
                if an["available"]:
                    avail[i, t, an["action"]] = True
                    vals[i, t, an["action"]] = an["value"]
    batch = TrajectoryBatch(S, A, R, lengths)
    return batch, (AnnotatedDataset(batch, vals, avail) if has_ann else None)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def mdp_fingerprint(mdp: TabularMDP) -> str:
    return array_fingerprint(mdp.transition, mdp.reward_mean, mdp.reward_std, mdp.initial_dist,
                             np.array([mdp.horizon, mdp.discount]))
