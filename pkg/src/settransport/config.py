"""Config loading: defaults, named presets, and user JSON overrides.

A config value on the command line is either a preset name or a path to a
JSON file; the file may itself start from a preset via a top-level
``"preset"`` key.  Validation reports problems with JSON-pointer paths
(``/model/blocks/0: expected an integer``) so errors in nested overrides
are easy to locate.
"""

from __future__ import annotations

import copy
import json
import os
from typing import Any

from . import data as data_mod
from . import kernels
from . import model as model_mod
from . import train as train_mod

__all__ = ["ConfigError", "DEFAULTS", "PRESETS", "load_config",
           "build_model_config", "build_train_settings", "build_datasets"]


class ConfigError(ValueError):
    """Invalid configuration; message starts with a JSON-pointer path."""


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "model": {
        "kind": "sequence",
        "variant": None,
        "blocks": [2],
        "base_channels": 32,
        "heads": 1,
        "m": 16,
        "num_classes": 2,
        "mlp_ratio": 4.0,
        "attention": "set",
        "in_channels": 1,
        "image_size": 32,
        "seq_len": 64,
        "input_dim": 16,
        "learned_pos": False,
        "storage": "float64",
        "normalize_inputs": True,
    },
    "sinkhorn": {"eps": 0.1, "tol": 1e-6, "max_iter": 50},
    "nystrom": {"k": 64, "delta": 1e-6},
    "positional": {"enabled": True, "tau": 0.5, "renormalize": False},
    "kernel": {"cost": kernels.COST_INDUCED, "bandwidth": "median"},
    "references": {"trainable": True},
    "train": {
        "steps": 500,
        "batch_size": 32,
        "lr": 1e-3,
        "weight_decay": 0.05,
        "beta1": 0.9,
        "beta2": 0.999,
        "warmup_frac": 0.05,
        "eval_every": 100,
        "label_smoothing": 0.0,
    },
    "data": {
        "task": "needle",
        "n_train": 2000,
        "n_test": 500,
        "images": None,
        "labels": None,
        "test_images": None,
        "test_labels": None,
    },
    "bench": {
        "n": [1024, 2048, 4096],
        "m": 64,
        "d": 64,
        "k": 64,
        "reps": 20,
        "iterations": 30,
    },
}


PRESETS: dict[str, dict] = {
    # Motif-detection task where locality of the reference grid matters.
    "needle": {
        "model": {"kind": "sequence", "blocks": [2], "base_channels": 32,
                  "m": 16, "num_classes": 2, "seq_len": 64, "input_dim": 16},
        "sinkhorn": {"eps": 0.1, "max_iter": 50},
        "nystrom": {"k": 16},
        "positional": {"enabled": True, "tau": 0.1},
        "train": {"steps": 1500, "batch_size": 32, "lr": 3e-3,
                  "eval_every": 250},
        "data": {"task": "needle", "n_train": 2000, "n_test": 500},
    },
    # Same task under the dense softmax baseline; needs learned positions
    # since the penalty grid does not apply there.
    "needle-dpsa": {
        "model": {"kind": "sequence", "blocks": [2], "base_channels": 32,
                  "num_classes": 2, "seq_len": 64, "input_dim": 16,
                  "attention": "dpsa", "learned_pos": True},
        "positional": {"enabled": False},
        "train": {"steps": 1500, "batch_size": 32, "lr": 3e-3,
                  "eval_every": 250},
        "data": {"task": "needle", "n_train": 2000, "n_test": 500},
    },
    # Small grayscale geometry classification.
    "shapes": {
        "model": {"kind": "image", "blocks": [1, 1], "base_channels": 32,
                  "m": 16, "num_classes": 4, "image_size": 32},
        "sinkhorn": {"eps": 0.1, "max_iter": 50},
        "nystrom": {"k": 16},
        "positional": {"enabled": True, "tau": 0.5},
        "train": {"steps": 800, "batch_size": 32, "lr": 3e-3,
                  "eval_every": 200},
        "data": {"task": "shapes", "n_train": 2000, "n_test": 500},
    },
    # Desk-scale stand-ins for the large-corpus operating points; the
    # reference counts exceed early-stage token counts and get clamped
    # per stage, which is the intended behavior at reduced resolution.
    "imagenet-like": {
        "model": {"kind": "image", "variant": "miny", "base_channels": 16,
                  "m": 500, "num_classes": 4, "image_size": 64},
        "sinkhorn": {"eps": 0.1},
        "positional": {"enabled": True, "tau": 0.5},
        "train": {"steps": 200, "batch_size": 16, "lr": 1e-3,
                  "eval_every": 100},
        "data": {"task": "shapes", "n_train": 512, "n_test": 128},
    },
    "coco-like": {
        "model": {"kind": "image", "variant": "miny", "base_channels": 16,
                  "m": 750, "num_classes": 4, "image_size": 64},
        "sinkhorn": {"eps": 0.3},
        "positional": {"enabled": True, "tau": 0.8},
        "train": {"steps": 200, "batch_size": 16, "lr": 1e-3,
                  "eval_every": 100},
        "data": {"task": "shapes", "n_train": 512, "n_test": 128},
    },
    "ade-like": {
        "model": {"kind": "image", "variant": "miny", "base_channels": 16,
                  "m": 800, "num_classes": 4, "image_size": 64},
        "sinkhorn": {"eps": 0.3},
        "positional": {"enabled": True, "tau": 0.8},
        "train": {"steps": 200, "batch_size": 16, "lr": 1e-3,
                  "eval_every": 100},
        "data": {"task": "shapes", "n_train": 512, "n_test": 128},
    },
}


# ---------------------------------------------------------------------------
# leaf validators; each raises ConfigError with the JSON-pointer path


def _int(v, path):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer, got {v!r}")


def _number(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}")


def _bool(v, path):
    if not isinstance(v, bool):
        raise ConfigError(f"{path}: expected true or false, got {v!r}")


def _str(v, path):
    if not isinstance(v, str):
        raise ConfigError(f"{path}: expected a string, got {v!r}")


def _opt(inner):
    def check(v, path):
        if v is not None:
            inner(v, path)
    return check


def _choice(*options):
    def check(v, path):
        if v not in options:
            menu = ", ".join(repr(o) for o in options)
            raise ConfigError(f"{path}: expected one of {menu}, got {v!r}")
    return check


def _int_list(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{path}: expected a non-empty list of integers")
    for i, item in enumerate(v):
        _int(item, f"{path}/{i}")


def _int_or_list(v, path):
    if isinstance(v, list):
        _int_list(v, path)
    else:
        _int(v, path)


def _bandwidth(v, path):
    if v == "median":
        return
    _number(v, path)
    if v <= 0:
        raise ConfigError(f"{path}: bandwidth must be positive or 'median'")


_SCHEMA = {
    "seed": _int,
    "model": {
        "kind": _choice("sequence", "image"),
        "variant": _opt(_choice(*sorted(model_mod.VARIANTS))),
        "blocks": _int_list,
        "base_channels": _int,
        "heads": _int_or_list,
        "m": _int_or_list,
        "num_classes": _int,
        "mlp_ratio": _number,
        "attention": _choice("set", "dpsa"),
        "in_channels": _int,
        "image_size": _int,
        "seq_len": _int,
        "input_dim": _int,
        "learned_pos": _bool,
        "storage": _choice("float64", "float32"),
        "normalize_inputs": _bool,
    },
    "sinkhorn": {"eps": _number, "tol": _number, "max_iter": _int},
    "nystrom": {"k": _int, "delta": _number},
    "positional": {"enabled": _bool, "tau": _number, "renormalize": _bool},
    "kernel": {"cost": _choice(*kernels.COST_MODES), "bandwidth": _bandwidth},
    "references": {"trainable": _bool},
    "train": {
        "steps": _int,
        "batch_size": _int,
        "lr": _number,
        "weight_decay": _number,
        "beta1": _number,
        "beta2": _number,
        "warmup_frac": _number,
        "eval_every": _int,
        "label_smoothing": _number,
    },
    "data": {
        "task": _choice("needle", "shapes", "idx"),
        "n_train": _int,
        "n_test": _int,
        "images": _opt(_str),
        "labels": _opt(_str),
        "test_images": _opt(_str),
        "test_labels": _opt(_str),
    },
    "bench": {
        "n": _int_list,
        "m": _int,
        "d": _int,
        "k": _int,
        "reps": _int,
        "iterations": _int,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _validate(tree, schema, path=""):
    if isinstance(schema, dict):
        if not isinstance(tree, dict):
            raise ConfigError(f"{path or '/'}: expected an object")
        for key in tree:
            if key not in schema:
                raise ConfigError(f"{path}/{key}: unknown key")
        for key, sub in schema.items():
            _validate(tree[key], sub, f"{path}/{key}")
    else:
        schema(tree, path)


def load_config(source: str | None) -> dict:
    """Resolve a preset name or JSON file into a full effective config."""
    layers = []
    if source is not None:
        if source in PRESETS:
            layers.append(PRESETS[source])
        elif os.path.exists(source):
            try:
                with open(source, "r", encoding="utf-8") as fh:
                    user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"/: invalid JSON ({exc})") from exc
            if not isinstance(user, dict):
                raise ConfigError("/: expected a JSON object")
            user = dict(user)
            preset = user.pop("preset", None)
            if preset is not None:
                if preset not in PRESETS:
                    menu = ", ".join(sorted(PRESETS))
                    raise ConfigError(
                        f"/preset: unknown preset {preset!r} (have {menu})")
                layers.append(PRESETS[preset])
            layers.append(user)
        else:
            menu = ", ".join(sorted(PRESETS))
            raise ConfigError(
                f"/: {source!r} is neither a preset ({menu}) nor a file")
    effective = copy.deepcopy(DEFAULTS)
    for layer in layers:
        effective = _merge(effective, layer)
    _validate(effective, _SCHEMA)
    return effective


def _as_stage_spec(value):
    return tuple(value) if isinstance(value, list) else value


def build_model_config(effective: dict) -> model_mod.ModelConfig:
    m = effective["model"]
    pos = effective["positional"]
    sh = effective["sinkhorn"]
    ny = effective["nystrom"]
    ker = effective["kernel"]
    bandwidth = None if ker["bandwidth"] == "median" else float(ker["bandwidth"])
    try:
        return model_mod.ModelConfig(
            kind=m["kind"],
            num_classes=m["num_classes"],
            blocks=tuple(m["blocks"]),
            base_channels=m["base_channels"],
            heads=_as_stage_spec(m["heads"]),
            m=_as_stage_spec(m["m"]),
            eps=float(sh["eps"]),
            tau=float(pos["tau"]) if pos["enabled"] else None,
            positional_renormalize=pos["renormalize"],
            nystrom_k=ny["k"],
            nystrom_delta=float(ny["delta"]),
            cost_mode=ker["cost"],
            bandwidth=bandwidth,
            normalize_inputs=m["normalize_inputs"],
            references_trainable=effective["references"]["trainable"],
            sinkhorn_tol=float(sh["tol"]),
            sinkhorn_iters=sh["max_iter"],
            mlp_ratio=float(m["mlp_ratio"]),
            attention=m["attention"],
            learned_pos=m["learned_pos"],
            in_channels=m["in_channels"],
            image_size=m["image_size"],
            seq_len=m["seq_len"],
            input_dim=m["input_dim"],
            variant=m["variant"],
            storage=m["storage"],
        )
    except ValueError as exc:
        raise ConfigError(f"/model: {exc}") from exc


def build_train_settings(effective: dict) -> train_mod.TrainSettings:
    t = effective["train"]
    try:
        return train_mod.TrainSettings(
            steps=t["steps"],
            batch_size=t["batch_size"],
            lr=float(t["lr"]),
            weight_decay=float(t["weight_decay"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            warmup_frac=float(t["warmup_frac"]),
            eval_every=t["eval_every"],
            label_smoothing=float(t["label_smoothing"]),
        )
    except ValueError as exc:
        raise ConfigError(f"/train: {exc}") from exc


def build_datasets(effective: dict, seed: int):
    """(train, test) datasets for the configured task."""
    d = effective["data"]
    m = effective["model"]
    task = d["task"]
    if task == "needle":
        make = lambda count, split: data_mod.synth_needle(  # noqa: E731
            count, seq_len=m["seq_len"], vocab_dim=m["input_dim"],
            seed=seed, split=split)
    elif task == "shapes":
        make = lambda count, split: data_mod.synth_shapes(  # noqa: E731
            count, image_size=m["image_size"], seed=seed, split=split)
    else:
        for key in ("images", "labels", "test_images", "test_labels"):
            if d[key] is None:
                raise ConfigError(f"/data/{key}: required when task is 'idx'")
        train = data_mod.load_idx(d["images"], d["labels"], split="train")
        test = data_mod.load_idx(d["test_images"], d["test_labels"],
                                 split="test")
        return train, test
    try:
        return make(d["n_train"], "train"), make(d["n_test"], "test")
    except ValueError as exc:
        raise ConfigError(f"/data: {exc}") from exc
