"""Command-line entry points.

Commands::

    anchorattack build-prototypes  --guidance-dir D --out bank.abk [...]
    anchorattack attack            --bank bank.abk --input-dir D --out RUN [...]
    anchorattack evaluate          --run RUN [--train-dir D] [--bank F]
    anchorattack diagnose          --run RUN [--train-dir D]
    anchorattack serve-loopback    [--host H --port P | --stdio]

``--config FILE`` loads a JSON run configuration; explicit flags override
file values. Exit codes: 0 success, 1 usage or configuration error, 2
runtime failure. Machine-readable failures are printed as ``ERROR: ...``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import containers, runio, synthdata
from .attack import pa_attack, with_overrides
from .errors import ConfigError
from .evalharness import (
    ablation_suite,
    attention_shift,
    make_retrieval_task,
    srr,
    token_mask_experiment,
    train_probe,
    validate_adversarial,
)
from .prototypes import (
    GUIDANCE_MODES,
    build_memory,
    build_prototypes,
    clamp_pca_width,
    kmeans,
    pca_fit,
    pca_project,
)
from .seeding import derive_seed
from .server import TcpEncoderServer, serve_stdio

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the documented contract is 1
    def error(self, message):
        print(f"ERROR: {message}", file=sys.stderr)
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="anchorattack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="top-level seed (io.seed)")

    p = sub.add_parser("build-prototypes", help="encode guidance images into a prototype bank")
    add_common(p)
    p.add_argument("--guidance-dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--m", type=int, help="cap on guidance images used")
    p.add_argument("--width", type=int, help="PCA dimension")
    p.add_argument("--k", type=int, help="cluster count")
    p.add_argument("--mode", choices=GUIDANCE_MODES)
    p.add_argument("--eval-manifest", type=Path, help="labels.csv of the evaluation set")

    p = sub.add_parser("attack", help="run the attack over a directory of images")
    add_common(p)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--input-dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--jobs", type=int)
    for flag, cast in [
        ("epsilon", float), ("alpha", float), ("s1", int), ("s2", int),
        ("guidance-weight", float), ("temperature", float), ("eta", float),
        ("stages", int), ("layer-selector", str),
    ]:
        p.add_argument(f"--{flag}", type=cast, dest=flag.replace("-", "_"))
    p.add_argument("--no-attention", action="store_true", help="uniform token weights")

    p = sub.add_parser("evaluate", help="score a finished run and emit SRR reports")
    add_common(p)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--train-dir", type=Path, help="labeled clean set for probe training")
    p.add_argument("--bank", type=Path, help="bank for ablation grids")

    p = sub.add_parser("diagnose", help="export plot data from a finished run")
    add_common(p)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--train-dir", type=Path)

    p = sub.add_parser("serve-loopback", help="serve the reference encoder over the wire protocol")
    add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--stdio", action="store_true", help="serve on stdin/stdout instead of TCP")

    return parser


def _resolve_config(args) -> dict:
    config = runio.load_config(args.config) if args.config else runio.default_config()
    if args.seed is not None:
        config["io"]["seed"] = args.seed
    return config


def _dataset_hash(ids, images) -> bytes:
    digest = hashlib.sha256()
    for image_id, img in zip(ids, images):
        digest.update(image_id.encode("utf-8"))
        digest.update(containers.tensor_bytes(np.asarray(img, dtype=np.float64)))
    return digest.digest()


# -- build-prototypes ----------------------------------------------------------


def cmd_build_prototypes(args) -> int:
    config = _resolve_config(args)
    if args.guidance_dir is not None:
        config["prototype"]["guidance_dir"] = str(args.guidance_dir)
    for key in ("m", "width", "k", "mode"):
        value = getattr(args, key)
        if value is not None:
            config["prototype"][key] = value
    proto = config["prototype"]
    if not proto["guidance_dir"]:
        raise ConfigError("no guidance directory configured")

    pairs = runio.list_input_images(proto["guidance_dir"])
    if not pairs:
        raise ConfigError(f"guidance directory {proto['guidance_dir']} holds no images")
    pairs = pairs[: int(proto["m"])]
    ids = [image_id for image_id, _ in pairs]
    images = [runio.load_image(path) for _, path in pairs]

    eval_ids: set[str] = set()
    if args.eval_manifest is not None:
        eval_ids = {row[0] for row in synthdata.load_labels(args.eval_manifest.parent)}

    seed = config["io"]["seed"]
    provider = runio.provider_factory(config)()
    memory = build_memory(provider, images, ids, eval_ids)
    info = provider.info()
    width = clamp_pca_width(int(proto["width"]), len(memory), info.n * info.d)
    model = pca_fit(memory, width)
    assignments = kmeans(
        pca_project(model, memory), int(proto["k"]), derive_seed(seed, "kmeans")
    )
    bank = build_prototypes(
        memory, assignments, int(proto["k"]), proto["mode"],
        keep_samples=bool(proto["keep_samples"]),
    )

    source_hash = _dataset_hash(ids, images)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    containers.write_bank(args.out, bank, seed=seed, source_hash=source_hash)
    runio.write_json(
        args.out.with_suffix(args.out.suffix + ".manifest.json"),
        {
            "m": len(memory),
            "width": width,
            "k": int(proto["k"]),
            "mode": proto["mode"],
            "cluster_sizes": [int(s) for s in bank.cluster_sizes],
            "source_hash": source_hash.hex(),
            "seed": seed,
        },
    )
    print(f"wrote bank with {bank.num_prototypes} prototypes to {args.out}")
    return 0


# -- attack --------------------------------------------------------------------


def cmd_attack(args) -> int:
    config = _resolve_config(args)
    if args.input_dir is not None:
        config["io"]["input_dir"] = str(args.input_dir)
    if args.jobs is not None:
        config["io"]["jobs"] = args.jobs
    for key in (
        "epsilon", "alpha", "s1", "s2", "guidance_weight",
        "temperature", "eta", "stages", "layer_selector",
    ):
        value = getattr(args, key)
        if value is not None:
            config["attack"][key] = value
    if args.no_attention:
        config["attack"]["use_attention"] = False
    if not config["io"]["input_dir"]:
        raise ConfigError("no input directory configured")
    # "." = the run directory itself: keeps the saved document relocatable
    config["io"]["output_dir"] = "."
    config["io"]["bank_path"] = str(args.bank)

    bank, _, _ = containers.read_bank(args.bank)
    seed = config["io"]["seed"]
    factory = runio.provider_factory(config)
    worker_state = threading.local()

    def get_provider():
        if not hasattr(worker_state, "provider"):
            worker_state.provider = factory()
        return worker_state.provider

    pairs = runio.list_input_images(config["io"]["input_dir"])
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    runio.save_config(run_dir / "config.json", config)

    def attack_one(item):
        index, (image_id, path) = item
        try:
            image = runio.load_image(path)
            cfg = runio.attack_config_from(config, derive_seed(seed, f"attack/{image_id}"))
            trace = pa_attack(get_provider(), image, bank, cfg)
            return index, image_id, path, trace, None
        except Exception as exc:  # per-image isolation: record, keep going
            log.warning("attack failed for %s: %s", image_id, exc)
            return index, image_id, path, None, f"{type(exc).__name__}: {exc}"

    jobs = max(1, int(config["io"]["jobs"]))
    items = list(enumerate(pairs))
    if jobs == 1:
        results = [attack_one(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(attack_one, items))
    results.sort(key=lambda r: r[0])

    rows = []
    for _, image_id, path, trace, error in results:
        if trace is None:
            rows.append([image_id, "failed", "", "", "", "", str(path), "", error])
            continue
        runio.write_trace_dir(run_dir, image_id, path, trace, seed)
        final = trace.per_step[-1] if trace.per_step else None
        rows.append(
            [
                image_id,
                "ok",
                trace.anchor_index,
                len(trace.per_step),
                final.loss.objective if final else "",
                final.linf if final else 0.0,
                str(path),
                f"images/{image_id}/adv.att",  # relative to the run directory
                "",
            ]
        )
    runio.write_csv(run_dir / "summary.csv", runio.SUMMARY_COLUMNS, rows, seed)
    n_ok = sum(1 for r in rows if r[1] == "ok")
    print(f"attacked {n_ok}/{len(rows)} images into {run_dir}")
    return 0


# -- evaluate ------------------------------------------------------------------


def _load_run(run_path: Path):
    config_path = run_path / "config.json"
    if not config_path.exists():
        raise ConfigError(f"{run_path} is not a run directory (missing config.json)")
    config = runio.load_config(config_path)
    summary = runio.read_csv(run_path / "summary.csv")
    return config, summary


def _labeled_images(directory) -> list[tuple[np.ndarray, int]]:
    directory = Path(directory)
    return [
        (runio.load_image(directory / rel), label)
        for _, label, rel in synthdata.load_labels(directory)
    ]


def _build_task(provider, config, train_dir):
    train_dir = train_dir or config["eval"]["train_dir"]
    if not train_dir:
        raise ConfigError("no labeled training directory for the surrogate task")
    labeled = _labeled_images(train_dir)
    seed = derive_seed(config["io"]["seed"], "probe")
    if config["eval"]["task"] == "retrieval":
        return make_retrieval_task(provider, labeled)
    return train_probe(provider, labeled, seed)


def _eval_pairs(config, summary, run_path):
    """Per scored image: (id, clean image, adv image, label)."""
    input_dir = Path(config["io"]["input_dir"])
    labels = {image_id: label for image_id, label, _ in synthdata.load_labels(input_dir)}
    out = []
    for row in summary:
        if row["status"] != "ok":
            continue
        image_id = row["image_id"]
        if image_id not in labels:
            raise ConfigError(f"no label for image {image_id} in {input_dir}/labels.csv")
        clean = runio.load_image(row["clean_path"])
        adv = containers.read_tensor(run_path / "images" / image_id / "adv.att")
        validate_adversarial(clean, adv, float(config["attack"]["epsilon"]))
        out.append((image_id, clean, adv, labels[image_id]))
    if not out:
        raise ConfigError("run directory holds no successful traces")
    return out


def cmd_evaluate(args) -> int:
    run_path = Path(args.run)
    config, summary = _load_run(run_path)
    if args.seed is not None:
        config["io"]["seed"] = args.seed
    provider = runio.provider_factory(config)()
    task = _build_task(provider, config, args.train_dir)
    pairs = _eval_pairs(config, summary, run_path)

    labels = [label for _, _, _, label in pairs]
    clean_grids = [provider.encode(clean)[0].patch_tokens for _, clean, _, _ in pairs]
    adv_grids = [provider.encode(adv)[0].patch_tokens for _, _, adv, _ in pairs]
    report = srr(task.score(clean_grids, labels), task.score(adv_grids, labels))

    out_dir = run_path / "eval"
    out_dir.mkdir(exist_ok=True)
    runio.write_json(
        out_dir / f"srr_{config['eval']['task']}.json",
        {
            "task": config["eval"]["task"],
            "n_images": len(pairs),
            "score_clean": report.score_clean,
            "score_adv": report.score_adv,
            "srr": report.srr,
            "seed": config["io"]["seed"],
        },
    )

    grid = config["eval"]["grid"]
    if grid:
        bank_path = args.bank or config["io"]["bank_path"]
        if not bank_path:
            raise ConfigError("ablation grid configured but no bank path available")
        bank, _, _ = containers.read_bank(bank_path)
        base = runio.attack_config_from(config, seed=0)
        rows = ablation_suite(
            provider,
            bank,
            [clean for _, clean, _, _ in pairs],
            labels,
            task,
            grid,
            base,
            seed=derive_seed(config["io"]["seed"], "ablation"),
        )
        keys = sorted({k for row in rows for k in row})
        runio.write_csv(
            out_dir / "ablation.csv",
            keys,
            [[row.get(k, "") for k in keys] for row in rows],
            config["io"]["seed"],
        )
    print(f"srr={report.srr!r} over {len(pairs)} images -> {out_dir}")
    return 0


# -- diagnose ------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    run_path = Path(args.run)
    config, summary = _load_run(run_path)
    provider = runio.provider_factory(config)()
    seed = config["io"]["seed"]
    out_dir = run_path / "diagnostics"
    out_dir.mkdir(exist_ok=True)
    ok_ids = [row["image_id"] for row in summary if row["status"] == "ok"]

    # attention shift between stage weights
    shift_rows = []
    for image_id in ok_ids:
        img_dir = run_path / "images" / image_id
        w1_path = img_dir / "weights_stage1.att"
        w2_path = img_dir / "weights_stage2.att"
        if not (w1_path.exists() and w2_path.exists()):
            log.warning("%s: fewer than two stage weight records, skipped", image_id)
            continue
        stats = attention_shift(
            containers.read_tensor(w1_path),
            containers.read_tensor(w2_path),
            top_k=config["eval"]["top_k"],
        )
        shift_rows.append([image_id, stats.spearman, stats.l1, stats.top_k_overlap, stats.k])
    if shift_rows:
        runio.write_csv(
            out_dir / "attention_shift.csv",
            ["image_id", "spearman", "l1", "top_k_overlap", "k"],
            shift_rows,
            seed,
        )

    # per-token deviation matrices for external plotting
    for image_id in ok_ids:
        img_dir = run_path / "images" / image_id
        for stem in ("token_deviation", "attention_deviation"):
            src = img_dir / f"{stem}.att"
            if not src.exists():
                log.warning("%s: no %s record, heatmap export skipped", image_id, stem)
                continue
            matrix = containers.read_tensor(src)
            header = ["step"] + [f"token_{j}" for j in range(matrix.shape[1])]
            rows = [[i] + [float(v) for v in matrix[i]] for i in range(matrix.shape[0])]
            runio.write_csv(out_dir / f"{stem}_{image_id}.csv", header, rows, seed)

    # masking curve needs a scoring task; optional
    train_dir = args.train_dir or config["eval"]["train_dir"]
    if train_dir:
        task = _build_task(provider, config, train_dir)
        input_dir = Path(config["io"]["input_dir"])
        labeled = [
            (runio.load_image(input_dir / rel), label)
            for _, label, rel in synthdata.load_labels(input_dir)
        ]
        images = [img for img, _ in labeled]
        labels = [label for _, label in labeled]
        rows = []
        for strategy in config["eval"]["mask_strategies"]:
            curve = token_mask_experiment(
                provider,
                task,
                images,
                labels,
                config["eval"]["proportions"],
                strategy=strategy,
                seed=derive_seed(seed, f"mask/{strategy}"),
                layer_selector=config["attack"]["layer_selector"],
            )
            rows += [[strategy, rho, ratio] for rho, ratio in curve]
        runio.write_csv(
            out_dir / "mask_curve.csv", ["strategy", "proportion", "score_ratio"], rows, seed
        )
    else:
        log.warning("no labeled training directory: mask curve skipped")
    print(f"diagnostics written to {out_dir}")
    return 0


# -- serve-loopback -------------------------------------------------------------


def cmd_serve_loopback(args) -> int:
    config = _resolve_config(args)
    provider = runio.provider_factory(config)()
    if args.stdio:
        serve_stdio(provider, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    server = TcpEncoderServer(provider, host=args.host, port=args.port).start()
    print(f"LISTENING {server.host} {server.port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


_COMMANDS = {
    "build-prototypes": cmd_build_prototypes,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "serve-loopback": cmd_serve_loopback,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        # the package's error taxonomy (ConfigError, ShapeError, disjointness,
        # degenerate data) is all ValueError: configuration-class failures
        print(f"ERROR: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"ERROR: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
