"""Checkpoints, metrics streams and run-directory locking.

Checkpoints are ``.npz`` archives.  Arrays live under ``param/``, ``op/`` and
``adam/`` prefixes; ``__schema__`` holds the format tag and ``__meta__`` a
JSON document (model spec, search state, architecture).
"""

import hashlib
import json
import os

import numpy as np

CHECKPOINT_SCHEMA = "dms.checkpoint/1"


class SchemaError(ValueError):
    pass


def save_checkpoint(path, model, meta=None, optimizer=None):
    arrays = {f"param/{name}": data for name, data in model.state_dict().items()}
    for name, op in model.ops.items():
        arrays[f"op/{name}/a"] = np.array([op.ratio])
        arrays[f"op/{name}/importance"] = op.importance
    if optimizer is not None:
        for key, value in optimizer.state_dict().items():
            arrays[f"adam/{key}"] = np.asarray(value)
    meta = dict(meta or {})
    meta.setdefault("spec", model.spec.model_dump())
    arrays["__schema__"] = np.array(CHECKPOINT_SCHEMA)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns ``{"params", "ops", "adam", "meta"}``; rejects a foreign or missing schema tag."""
    with np.load(path, allow_pickle=False) as z:
        if "__schema__" not in z.files or str(z["__schema__"]) != CHECKPOINT_SCHEMA:
            tag = str(z["__schema__"]) if "__schema__" in z.files else None
            raise SchemaError(f"{path}: unsupported checkpoint schema {tag!r}, expected {CHECKPOINT_SCHEMA!r}")
        out = {"params": {}, "ops": {}, "adam": {}, "meta": json.loads(str(z["__meta__"]))}
        for key in z.files:
            if key.startswith("param/"):
                out["params"][key[6:]] = z[key]
            elif key.startswith("op/"):
                name, field = key[3:].rsplit("/", 1)
                out["ops"].setdefault(name, {})[field] = z[key][0] if field == "a" else z[key]
            elif key.startswith("adam/"):
                out["adam"][key[5:]] = z[key]
    return out


def restore(model, ckpt):
    model.load_state_dict(ckpt["params"])
    for name, state in ckpt["ops"].items():
        if name in model.ops:
            model.ops[name].load_state_dict(state)


def weights_digest(model):
    """SHA-256 over parameter names and bytes, in parameter order."""
    h = hashlib.sha256()
    for name, data in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class MetricsWriter:
    """Append-only line-delimited JSON, flushed per record."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")

    def write(self, record):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class DirectoryLock:
    """Exclusive lock file inside an output directory."""

    def __init__(self, directory):
        self.path = os.path.join(directory, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory is locked by another run ({self.path})") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass
