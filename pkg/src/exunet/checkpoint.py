"""Checkpoint archive: a zip holding `manifest.json` (config, array table,
training progress, rng state) and `arrays.bin` (raw little-endian arrays
concatenated in manifest order). Reload is bit-exact.
"""

import base64
import dataclasses
import json
import zipfile

import numpy as np
import torch

from .netcore import JointNet, ModelConfig, build_model

FORMAT = "exunet-ckpt-v1"

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "uint8": "|u1",
}


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    if a.dtype.name not in _DTYPES:
        raise TypeError(f"unsupported checkpoint dtype {a.dtype}")
    return a


class _ArrayTable:
    def __init__(self):
        self.entries = []
        self.blobs = []

    def add(self, name: str, array: np.ndarray):
        arr = np.asarray(array)
        # record the shape first: ascontiguousarray promotes 0-dim to 1-dim
        self.entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name}
        )
        blob = np.ascontiguousarray(arr).astype(_DTYPES[arr.dtype.name])
        self.blobs.append(blob.tobytes())


def save_checkpoint(
    path,
    model: JointNet,
    train_cfg: dict | None = None,
    epoch: int = 0,
    step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    np_rng: np.random.Generator | None = None,
):
    table = _ArrayTable()
    for key, tensor in model.state_dict().items():
        table.add(f"model/{key}", _to_numpy(tensor))

    optim_groups = None
    optim_state_fields = {}
    if optimizer is not None:
        sd = optimizer.state_dict()
        optim_groups = sd["param_groups"]
        for idx in sorted(sd["state"]):
            fields = []
            for fname in sorted(sd["state"][idx]):
                val = sd["state"][idx][fname]
                if not isinstance(val, torch.Tensor):
                    val = torch.tensor(val)
                table.add(f"optim/{idx}/{fname}", _to_numpy(val))
                fields.append(fname)
            optim_state_fields[str(idx)] = fields

    table.add("rng/torch", torch.get_rng_state().numpy())

    manifest = {
        "format": FORMAT,
        "config": {
            "model": dataclasses.asdict(model.cfg) | {"widths": list(model.cfg.widths)},
            "train": train_cfg,
        },
        "epoch": int(epoch),
        "step": int(step),
        "numpy_rng": _rng_state_to_json(np_rng),
        "optim_param_groups": optim_groups,
        "optim_state_fields": optim_state_fields,
        "arrays": table.entries,
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        zf.writestr("arrays.bin", b"".join(table.blobs))


def _rng_state_to_json(rng):
    if rng is None:
        return None
    # bit-generator state is a nested dict of (big) ints and strings
    return json.loads(json.dumps(rng.bit_generator.state))


def load_checkpoint(path):
    """Returns (manifest dict, {array name: np.ndarray})."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("arrays.bin")
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} checkpoint")
    arrays = {}
    offset = 0
    for entry in manifest["arrays"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
        offset += nbytes
    return manifest, arrays


def model_config_from_manifest(manifest) -> ModelConfig:
    d = dict(manifest["config"]["model"])
    d["widths"] = tuple(d["widths"])
    return ModelConfig(**d)


def restore_model(path, eval_only: bool = False):
    """Rebuild the model from a checkpoint.

    With `eval_only`, a unet checkpoint misses nothing, but a unet checkpoint
    that was stripped of its decoder arrays still loads: the evaluation path
    of that mode never touches the decoder.
    """
    manifest, arrays = load_checkpoint(path)
    cfg = model_config_from_manifest(manifest)
    model = build_model(cfg)
    state = {
        name[len("model/"):]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("model/")
    }
    missing = [k for k in model.state_dict() if k not in state]
    if missing:
        removable = eval_only and cfg.mode == "unet"
        if not (removable and all(k.startswith("decoder.") for k in missing)):
            raise ValueError(f"checkpoint is missing model arrays: {missing[:5]} ...")
        model.load_state_dict(state, strict=False)
    else:
        model.load_state_dict(state)
    model.eval()
    return model, manifest


def restore_optimizer(optimizer, manifest, arrays):
    groups = manifest["optim_param_groups"]
    if groups is None:
        raise ValueError("checkpoint carries no optimizer state")
    state = {}
    for idx_str, fields in manifest["optim_state_fields"].items():
        idx = int(idx_str)
        state[idx] = {}
        for fname in fields:
            arr = arrays[f"optim/{idx}/{fname}"]
            t = torch.from_numpy(arr.copy())
            state[idx][fname] = t.reshape(()) if arr.shape == () else t
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def restore_rng(manifest, arrays):
    """Returns the numpy Generator saved in the checkpoint and restores the
    torch global rng state."""
    torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
    np_rng = None
    if manifest["numpy_rng"] is not None:
        np_rng = np.random.default_rng()
        np_rng.bit_generator.state = manifest["numpy_rng"]
    return np_rng
