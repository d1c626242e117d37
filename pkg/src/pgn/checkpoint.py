"""Single-file checkpoints: a plain-text manifest followed by raw tensors.

Layout::

    PGNCKPT 1\\n
    manifest <nbytes>\\n
    <manifest: JSON text, nbytes long>
    <payload: little-endian float32 tensors, back to back>

The manifest lists every tensor with its name, shape and byte offset in the
payload, plus the training config, the RNG state, the epoch counter and the
metric rows so far.  Parameters carry their Adam moments and step counts,
which is all the optimiser state there is, so a resumed run continues
exactly where the interrupted one stopped.
"""

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from pgn import diffcore as dc
from pgn.metrics import MetricsRow
from pgn.models import FrozenClassifier, Network, spec_from_dict, spec_to_dict
from pgn.train import TrainConfig, TrainState

MAGIC = b"PGNCKPT 1\n"
FIELDS = ("data", "adam_m", "adam_v")


class CheckpointError(ValueError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


# ---------------------------------------------------------------- rng state


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.dtype.str, "values": [int(v) for v in obj.ravel()], "shape": list(obj.shape)}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["values"], dtype=np.dtype(obj["__array__"])).reshape(obj["shape"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def rng_state(rng):
    return _jsonable(rng.bit_generator.state)


def restore_rng(state):
    state = _from_jsonable(state)
    name = state.get("bit_generator")
    if name != "Philox":
        raise CheckpointError(f"unsupported bit generator {name!r}")
    bitgen = np.random.Philox()
    bitgen.state = state
    return np.random.Generator(bitgen)


# ---------------------------------------------------------------- writing


def _row_to_list(row):
    return [None if isinstance(v, float) and math.isnan(v) else v for v in row.values()]


def _row_from_list(values):
    e, a, b, c, d, m, p, q = values
    return MetricsRow(int(e), float(a), float(b), float(c), float(d), float("nan") if m is None else float(m), int(p), int(q))


def _network_entries(role, net, with_optimizer):
    entries = []
    for name, p in net.named_parameters():
        fields = FIELDS if with_optimizer else FIELDS[:1]
        for fld in fields:
            entries.append((f"{role}/{name}/{fld}", getattr(p, fld)))
    return entries


def save_networks(path, networks, meta):
    """Write ``networks`` (role -> (Network, with_optimizer)) plus ``meta`` atomically."""
    tensors, manifest_nets = [], {}
    offset = 0
    for role, (net, with_opt) in networks.items():
        manifest_nets[role] = {
            "spec": spec_to_dict(net.spec),
            "trainable": [p.trainable for p in net.parameters()],
            "step_counts": [p.step_count for p in net.parameters()],
        }
        for name, arr in _network_entries(role, net, with_opt):
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
            tensors[-1]["_raw"] = raw
    payload = b"".join(t.pop("_raw") for t in tensors)
    manifest = dict(meta)
    manifest.update(
        networks=manifest_nets,
        tensors=tensors,
        payload_bytes=len(payload),
        payload_sha256=hashlib.sha256(payload).hexdigest(),
    )
    text = json.dumps(manifest, indent=1, sort_keys=True, allow_nan=False).encode()
    blob = MAGIC + f"manifest {len(text)}\n".encode() + text + payload

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(G, D, f, cfg, rng, path, epoch=0, rows=()):
    """Persist a PGN run: generator and discriminator with optimiser state,
    the classifier weights, config, RNG state, epoch counter and metrics."""
    meta = {
        "kind": "pgn",
        "config": cfg.to_dict(),
        "rng": rng_state(rng),
        "epoch": int(epoch),
        "rows": [_row_to_list(r) for r in rows],
        "classifier": {"access_policy": f.access_policy, "vanilla_accuracy": f.vanilla_accuracy},
    }
    save_networks(path, {"generator": (G, True), "discriminator": (D, True), "classifier": (f.network, False)}, meta)


def save_classifier(f, path, extra=None):
    meta = {
        "kind": "classifier",
        "classifier": {"access_policy": f.access_policy, "vanilla_accuracy": f.vanilla_accuracy},
    }
    if extra:
        meta.update(extra)
    save_networks(path, {"classifier": (f.network, False)}, meta)


# ---------------------------------------------------------------- reading


def read_raw(path):
    """Return ``(manifest, payload)`` after structural and integrity checks."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    if not blob.startswith(MAGIC):
        raise CheckpointCorruptError(f"{path}: not a checkpoint (bad magic)")
    rest = blob[len(MAGIC) :]
    head, sep, rest = rest.partition(b"\n")
    parts = head.split()
    if not sep or len(parts) != 2 or parts[0] != b"manifest" or not parts[1].isdigit():
        raise CheckpointCorruptError(f"{path}: malformed manifest header")
    n = int(parts[1])
    if len(rest) < n:
        raise CheckpointCorruptError(f"{path}: truncated manifest ({len(rest)} of {n} bytes)")
    try:
        manifest = json.loads(rest[:n])
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path}: unreadable manifest: {exc}") from None
    payload = rest[n:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointCorruptError(
            f"{path}: payload is {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}"
        )
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointCorruptError(f"{path}: payload digest mismatch")
    return manifest, payload


def _restore_networks(manifest, payload):
    arrays = {}
    for t in manifest["tensors"]:
        start, stop = t["offset"], t["offset"] + t["nbytes"]
        if stop > len(payload) or t["nbytes"] != 4 * int(np.prod(t["shape"], dtype=np.int64)):
            raise CheckpointCorruptError(f"tensor {t['name']} lies outside the payload")
        arr = np.frombuffer(payload[start:stop], dtype="<f4").reshape(t["shape"])
        arrays[t["name"]] = arr.astype(dc.DTYPE)

    nets = {}
    for role, info in manifest["networks"].items():
        # initial weights are overwritten below; the throwaway rng keeps this deterministic
        net = Network(spec_from_dict(info["spec"]), dc.make_rng(0))
        params = net.named_parameters()
        if len(params) != len(info["trainable"]):
            raise CheckpointCorruptError(f"{role}: parameter count does not match its spec")
        for (name, p), trainable, steps in zip(params, info["trainable"], info["step_counts"]):
            key = f"{role}/{name}/data"
            if key not in arrays:
                raise CheckpointCorruptError(f"missing tensor {key}")
            if arrays[key].shape != p.shape:
                raise CheckpointCorruptError(f"{key}: shape {arrays[key].shape} != {p.shape}")
            p.data = arrays[key].copy()
            for fld in FIELDS[1:]:
                if f"{role}/{name}/{fld}" in arrays:
                    setattr(p, fld, arrays[f"{role}/{name}/{fld}"].copy())
            p.grad = np.zeros_like(p.data)
            p.requires_grad = bool(trainable)
            p.step_count = int(steps)
        nets[role] = net
    return nets


def _classifier(net, info):
    f = FrozenClassifier(net, info["access_policy"])
    f.vanilla_accuracy = info.get("vanilla_accuracy")
    return f


@dataclass
class Checkpoint:
    G: Network
    D: Network
    f: FrozenClassifier
    cfg: TrainConfig
    rng: np.random.Generator
    epoch: int
    rows: list

    def state(self):
        return TrainState(epoch=self.epoch, rows=list(self.rows), rng=self.rng)


def load_checkpoint(path):
    manifest, payload = read_raw(path)
    if manifest.get("kind") != "pgn":
        raise CheckpointError(f"{path}: holds a {manifest.get('kind')!r} checkpoint, not a PGN run")
    try:
        nets = _restore_networks(manifest, payload)
        cfg = TrainConfig(**manifest["config"])
        rng = restore_rng(manifest["rng"])
        rows = [_row_from_list(r) for r in manifest["rows"]]
        f = _classifier(nets["classifier"], manifest["classifier"])
        return Checkpoint(nets["generator"], nets["discriminator"], f, cfg, rng, int(manifest["epoch"]), rows)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointCorruptError(f"{path}: inconsistent manifest: {exc}") from None


def load_classifier(path):
    manifest, payload = read_raw(path)
    try:
        nets = _restore_networks(manifest, payload)
        return _classifier(nets["classifier"], manifest["classifier"])
    except (KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{path}: inconsistent manifest: {exc}") from None
