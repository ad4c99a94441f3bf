"""Versioned JSON checkpoints with bit-exact array payloads."""
import base64
import json

import numpy as np

FORMAT = "uqshift-checkpoint"
VERSION = 1


def encode_array(arr):
    arr = np.ascontiguousarray(arr)
    return {
        "dtype": arr.dtype.newbyteorder("<").str,
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype(arr.dtype.newbyteorder("<")).tobytes()).decode("ascii"),
    }


def decode_array(blob):
    raw = base64.b64decode(blob["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(blob["dtype"])).reshape(blob["shape"])
    return arr.astype(arr.dtype.newbyteorder("="))


def dumps(kind, payload):
    return json.dumps({"format": FORMAT, "version": VERSION, "kind": kind, **payload}, sort_keys=True)


def loads(text, kind=None):
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ValueError("not a uqshift checkpoint")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    return doc


def save(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(obj.to_checkpoint())


def load(path):
    """Load any checkpoint written by :func:`save`, dispatching on its kind."""
    from .calibrate import PlattCalibrator, VennAbersCalibrator
    from .forest import TrainedForest
    from .nn import TrainedMlp
    from .uq import BnnModel, DeepEnsemble, McDropoutModel

    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    kinds = {
        "mlp": TrainedMlp,
        "ensemble": DeepEnsemble,
        "mc_dropout": McDropoutModel,
        "bnn": BnnModel,
        "forest": TrainedForest,
        "platt": PlattCalibrator,
        "venn_abers": VennAbersCalibrator,
    }
    kind = loads(text)["kind"]
    return kinds[kind].from_checkpoint(text)
