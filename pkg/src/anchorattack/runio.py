"""Run configuration documents and on-disk run directories.

A run configuration is a JSON document with five sections (encoder,
prototype, attack, eval, io). Unknown keys anywhere are rejected so typos
fail instead of silently using defaults. All randomness flows from the
single ``io.seed``; component streams are split off by name via
``seeding.derive_seed``.

An attack run directory looks like::

    run/
      config.json                resolved configuration, sorted keys
      summary.csv                one row per input image
      images/<id>/
        adv.att                  adversarial image (tensor container)
        steps.csv                step,stage,vision_term,guide_term,objective,linf
        weights_stage<k>.att     token weights used in stage k (1-based)
        token_deviation.att      [steps, N] 1 - cos(adv token, clean token)
        attention_deviation.att  [steps, N] |attention - clean attention|
        meta.json                anchor index, clean path, sub-seed

Every CSV starts with a ``# seed=<seed>`` comment line. Floats are written
with ``repr`` so files round-trip bit-exactly and reruns are byte-identical.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from pathlib import Path

import numpy as np

from .attack import AttackConfig, AttackTrace
from .containers import read_tensor, write_tensor
from .encoder import EncoderConfig, init_encoder
from .errors import ConfigError
from .providers import LocalEncoderProvider, connect_tcp
from .seeding import derive_seed

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "encoder": {
        "kind": "micro",  # or "remote"
        "image_height": 32,
        "image_width": 32,
        "channels": 3,
        "patch_size": 4,
        "depth": 4,
        "heads": 4,
        "token_dim": 32,
        "mlp_ratio": 4.0,
        "host": "127.0.0.1",
        "port": 9641,
    },
    "prototype": {
        "m": 64,
        "width": 16,
        "k": 4,
        "mode": "farthest_prototype",
        "guidance_dir": None,
        "keep_samples": True,
    },
    "attack": {
        "epsilon": 2.0 / 255.0,
        "alpha": 1.0 / 255.0,
        "s1": 50,
        "s2": 100,
        "guidance_weight": 1.0,
        "temperature": 1.0 / 20.0,
        "layer_selector": "middle",
        "eta": None,
        "stages": 2,
        "use_attention": True,
        "record_deviation": True,
        "guidance_mode": None,
    },
    "eval": {
        "task": "classification-probe",
        "train_dir": None,
        "proportions": [0.0, 0.25, 0.5, 0.75, 1.0],
        "mask_strategies": ["random", "attention-keep-high"],
        "grid": None,
        "top_k": None,
    },
    "io": {
        "input_dir": None,
        "output_dir": None,
        "seed": 0,
        "jobs": 1,
        "bank_path": None,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge_section(base: dict, incoming: dict, section: str) -> None:
    for key, value in incoming.items():
        if key not in base:
            raise ConfigError(f"unknown key {section}.{key}")
        base[key] = value


def merge_config(config: dict, incoming: dict) -> dict:
    for section, body in incoming.items():
        if section not in config:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        _merge_section(config[section], body, section)
    return config


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            incoming = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(incoming, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge_config(default_config(), incoming)


def save_config(path, config: dict) -> None:
    with open(path, "w") as fh:
        json.dump(config, fh, sort_keys=True, indent=2)
        fh.write("\n")


def attack_config_from(config: dict, seed: int) -> AttackConfig:
    a = config["attack"]
    selector = a["layer_selector"]
    if isinstance(selector, str) and selector not in ("middle", "final"):
        try:
            selector = int(selector)
        except ValueError as exc:
            raise ConfigError(f"bad layer selector {selector!r}") from exc
    return AttackConfig(
        epsilon=float(a["epsilon"]),
        alpha=float(a["alpha"]),
        s1=int(a["s1"]),
        s2=int(a["s2"]),
        guidance_weight=float(a["guidance_weight"]),
        temperature=float(a["temperature"]),
        layer_selector=selector,
        eta=None if a["eta"] is None else float(a["eta"]),
        seed=seed,
        guidance_mode=a["guidance_mode"],
        stages=int(a["stages"]),
        use_attention=bool(a["use_attention"]),
        record_deviation=bool(a["record_deviation"]),
    )


def provider_factory(config: dict):
    """Callable producing a provider per worker; the local encoder is pure
    and shared, remote workers each own a connection."""
    section = config["encoder"]
    if section["kind"] == "micro":
        enc_cfg = EncoderConfig(
            image_height=int(section["image_height"]),
            image_width=int(section["image_width"]),
            channels=int(section["channels"]),
            patch_size=int(section["patch_size"]),
            depth=int(section["depth"]),
            heads=int(section["heads"]),
            token_dim=int(section["token_dim"]),
            mlp_ratio=float(section["mlp_ratio"]),
            seed=derive_seed(config["io"]["seed"], "encoder"),
        )
        shared = LocalEncoderProvider(init_encoder(enc_cfg))
        return lambda: shared
    if section["kind"] == "remote":
        host, port = section["host"], int(section["port"])
        return lambda: connect_tcp(host, port)
    raise ConfigError(f"unknown encoder kind {section['kind']!r}")


# -- images -------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an input image: tensor container, or 8-bit PNG mapped to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    return read_tensor(path)


def list_input_images(directory) -> list[tuple[str, Path]]:
    """(image_id, path) pairs: manifest order if labels.csv exists, else
    sorted directory scan of .att and .png files."""
    directory = Path(directory)
    manifest = directory / "labels.csv"
    if manifest.exists():
        from .synthdata import load_labels

        return [(image_id, directory / rel) for image_id, _, rel in load_labels(directory)]
    pairs = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in (".att", ".png"):
            pairs.append((path.stem, path))
    return pairs


# -- CSV helpers --------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path, header: list[str], rows: list[list], seed: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


# -- run directories ----------------------------------------------------------

STEP_COLUMNS = ["step", "stage", "vision_term", "guide_term", "objective", "linf"]
SUMMARY_COLUMNS = [
    "image_id",
    "status",
    "anchor_index",
    "steps",
    "final_objective",
    "final_linf",
    "clean_path",
    "adv_path",
    "error",
]


def write_trace_dir(run_dir, image_id: str, clean_path, trace: AttackTrace, seed: int) -> Path:
    img_dir = Path(run_dir) / "images" / image_id
    img_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(img_dir / "adv.att", trace.adv_image)
    rows = [
        [r.index, r.stage, r.loss.vision_term, r.loss.guide_term, r.loss.objective, r.linf]
        for r in trace.per_step
    ]
    write_csv(img_dir / "steps.csv", STEP_COLUMNS, rows, seed)
    for k, weights in enumerate(trace.weights_per_stage, start=1):
        write_tensor(img_dir / f"weights_stage{k}.att", weights)
    if trace.token_deviation is not None:
        write_tensor(img_dir / "token_deviation.att", trace.token_deviation)
    if trace.attention_deviation is not None:
        write_tensor(img_dir / "attention_deviation.att", trace.attention_deviation)
    write_json(
        img_dir / "meta.json",
        {
            "image_id": image_id,
            "anchor_index": trace.anchor_index,
            "clean_path": str(clean_path),
            "epsilon": trace.config.epsilon,
            "stages": trace.config.stages,
            "steps": len(trace.per_step),
            "seed": trace.config.seed,
        },
    )
    return img_dir


def load_trace_meta(run_dir, image_id: str) -> dict:
    with open(Path(run_dir) / "images" / image_id / "meta.json") as fh:
        return json.load(fh)
