"""Single-file JSON checkpoints of a trained :class:`PromptDILClassifier`.

Arrays are stored as base64 of their raw little-endian bytes, so a round trip
is bit-exact. The frozen backbone is not stored; it is rebuilt from the
estimator's seed. Only learned state goes in: prompt pool, memory bank,
per-layer enhancers, heads, class statistics, uncertainty weights, drift
monitors, RNG states and the per-stage snapshots used by cross composition.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

from ..drift import DriftMonitor, DriftReport
from ..exceptions import CheckpointError, CheckpointMismatchError, CorruptCheckpointError
from ..preservation import ClassifierHead, ClassStats
from ..routing import MemoryBank, PromptPool, QueryEnhancer
from ..weighting import UncertaintyWeights

FORMAT = "promptdil-checkpoint"
VERSION = 1


def encode_array(a):
    a = np.asarray(a)
    if a.dtype.kind == "f":
        a = a.astype("<f8")
    elif a.dtype.kind in "iu":
        a = a.astype("<i8")
    elif a.dtype.kind == "b":
        a = a.astype("|u1")
    else:
        raise CheckpointError(f"cannot store dtype {a.dtype}")
    return {"dtype": a.dtype.str, "shape": list(a.shape),
            "data": base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii")}


def decode_array(d):
    try:
        dtype = np.dtype(d["dtype"])
        raw = base64.b64decode(d["data"], validate=True)
        a = np.frombuffer(raw, dtype=dtype).reshape(d["shape"]).copy()
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"bad array record: {exc}") from exc
    return a.astype(bool) if dtype == np.dtype("|u1") else a


def _pool(p):
    return {"keys": encode_array(p.keys.data), "values": encode_array(p.values.data),
            "frozen": encode_array(p.frozen), "active": encode_array(p.active)}


def _unpool(d):
    return PromptPool(decode_array(d["keys"]), decode_array(d["values"]),
                      decode_array(d["frozen"]).astype(np.intp), decode_array(d["active"]).astype(np.intp))


def _bank(b):
    return {"keys": encode_array(b.keys), "values": encode_array(b.values), "momentum": b.momentum}


def _unbank(d):
    return MemoryBank(decode_array(d["keys"]), decode_array(d["values"]), d["momentum"])


def _enhancers(enh):
    return {str(layer): {k: encode_array(v) for k, v in e.state().items()} for layer, e in enh.items()}


def _unenhancers(d):
    return {int(layer): QueryEnhancer(**{k: decode_array(v) for k, v in w.items()}) for layer, w in d.items()}


def _head(h):
    if h is None:
        return None
    return {"weight": encode_array(h.weight.data), "bias": encode_array(h.bias.data), "frozen": h.frozen}


def _unhead(d):
    if d is None:
        return None
    return ClassifierHead(decode_array(d["weight"]), decode_array(d["bias"]), frozen=d["frozen"])


def _network_snapshot(snap):
    return {"pool": _pool(snap["pool"]), "bank": _bank(snap["bank"]), "enhancers": _enhancers(snap["enhancers"])}


def _unnetwork_snapshot(d):
    return {"pool": _unpool(d["pool"]), "bank": _unbank(d["bank"]), "enhancers": _unenhancers(d["enhancers"])}


def _stats(s):
    return {"count": encode_array(s.count), "mean": encode_array(s.mean), "sq_dev": encode_array(s.sq_dev)}


def _unstats(d):
    mean = decode_array(d["mean"])
    out = ClassStats(mean.shape[0], mean.shape[1])
    out.count, out.mean, out.sq_dev = decode_array(d["count"]), mean, decode_array(d["sq_dev"])
    return out


def params_hash(params):
    blob = json.dumps(params, sort_keys=True, default=list).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable_params(est):
    params = est.get_params()
    params["drop"] = list(params["drop"])
    if params["inject_layers"] is not None:
        params["inject_layers"] = [int(i) for i in params["inject_layers"]]
    return params


def checkpoint_state(est):
    """Everything learned by ``est`` as a JSON-ready dict (no raw data)."""
    net = est.network_
    return {
        "classes": encode_array(est.classes_),
        "n_tokens_in": est.n_tokens_in_,
        "input_dim": est.input_dim_,
        "n_stages": est.n_stages_,
        "pool": _pool(net.pool),
        "bank": _bank(net.bank),
        "enhancers": _enhancers(net.enhancers),
        "head": _head(est.head_),
        "teacher": _head(est.teacher_),
        "stats": _stats(est.stats_),
        "uw": None if est.uw_ is None else {n: float(s.data) for n, s in est.uw_.log_vars.items()},
        "monitors": [m.to_dict() for m in est.monitors_],
        "rng": {name: getattr(est, f"_{name}_rng").bit_generator.state for name in ("pseudo", "shuffle", "expand", "monitor")},
        "drift_reports": {str(k): encode_array(v.scores) for k, v in est.drift_reports_.items()},
        "expansions": {str(k): int(v) for k, v in est.expansions_.items()},
        "history": est.history_,
        "events": [list(e) for e in est.events_],
        "stage_snapshots": [{"network": _network_snapshot(s["network"]), "head": _head(s["head"])}
                            for s in est.stage_snapshots_],
    }


def save_checkpoint(est, path, config_hash=None):
    """Write ``est`` to ``path``; ``config_hash`` defaults to a hash of its parameters."""
    params = _jsonable_params(est)
    state = checkpoint_state(est)
    body = json.dumps(state, sort_keys=True)
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config_hash": config_hash or params_hash(params),
        "params": params,
        "checksum": hashlib.sha256(body.encode("utf-8")).hexdigest(),
        "state": state,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True))
    tmp.replace(path)
    return path


def load_checkpoint(path, config_hash=None):
    """Rebuild the estimator stored at ``path``.

    Raises :class:`CorruptCheckpointError` for unreadable or damaged files,
    :class:`CheckpointError` for an unknown format or version and
    :class:`CheckpointMismatchError` when ``config_hash`` is given and differs.
    """
    from .estimator import PromptDILClassifier

    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} is not supported (expected {VERSION})")
    if config_hash is not None and doc.get("config_hash") != config_hash:
        raise CheckpointMismatchError(
            f"checkpoint was written for config {doc.get('config_hash')}, not {config_hash}")
    try:
        state = doc["state"]
        body = json.dumps(state, sort_keys=True)
        if hashlib.sha256(body.encode("utf-8")).hexdigest() != doc["checksum"]:
            raise CorruptCheckpointError(f"checksum mismatch in {path}")
        params = dict(doc["params"])
        params["drop"] = tuple(params["drop"])
        est = PromptDILClassifier(**params)
        _restore(est, state)
    except CorruptCheckpointError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CorruptCheckpointError(f"damaged checkpoint {path}: {exc}") from exc
    return est


def _restore(est, state):
    classes = decode_array(state["classes"])
    dummy = np.zeros((1, state["n_tokens_in"], state["input_dim"]))
    est._initialize(dummy, classes)
    net = est.network_
    net.pool = _unpool(state["pool"])
    net.bank = _unbank(state["bank"])
    net.enhancers = _unenhancers(state["enhancers"])
    est.head_ = _unhead(state["head"])
    est.teacher_ = _unhead(state["teacher"])
    est.stats_ = _unstats(state["stats"])
    if state["uw"] is None:
        est.uw_ = None
    else:
        est.uw_ = UncertaintyWeights(tuple(state["uw"]))
        for n, v in state["uw"].items():
            est.uw_.log_vars[n].data = np.asarray(v, dtype=np.float64)
    est.monitors_ = [DriftMonitor.from_dict(m) for m in state["monitors"]]
    for name, st in state["rng"].items():
        getattr(est, f"_{name}_rng").bit_generator.state = st
    est.n_stages_ = state["n_stages"]
    est.drift_reports_ = {int(k): DriftReport(decode_array(v)) for k, v in state["drift_reports"].items()}
    est.expansions_ = {int(k): v for k, v in state["expansions"].items()}
    est.history_ = state["history"]
    est.events_ = [tuple(e) for e in state["events"]]
    est.stage_snapshots_ = [{"network": _unnetwork_snapshot(s["network"]), "head": _unhead(s["head"])}
                            for s in state["stage_snapshots"]]
