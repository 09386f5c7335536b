"""Command-line entry point: ``fedsynth generate-data | train | compare``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__, checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    CorpusError,
    concat_datasets,
    from_model_range,
    generate_site_dataset,
    load_paired_dataset,
    to_model_range,
    write_corpus,
)
from .federation import (
    make_client,
    restore_federation_checkpoint,
    run_federated_training,
)
from .metrics import evaluate_model
from .models import build_generator, export_parameters, import_parameters
from .report import MODEL_NAMES, ComparisonReport, build_report
from .training import EpochStats

log = logging.getLogger("fedsynth")

MODES = MODEL_NAMES


class ValidationError(Exception):
    pass


def version_stamp() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"fedsynth {__version__}" + (f" ({rev})" if rev else "")


def _set_determinism(cfg: ExperimentConfig) -> None:
    torch.use_deterministic_algorithms(cfg.deterministic)


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


def corpus_dir(cfg: ExperimentConfig, site_id: str, split: str) -> Path:
    return cfg.out_dir / "corpus" / f"site_{site_id}" / split


def run_dir(cfg: ExperimentConfig, mode: str) -> Path:
    return cfg.out_dir / "runs" / mode


def _load_split(cfg: ExperimentConfig, site_id: str, split: str):
    root = corpus_dir(cfg, site_id, split)
    if not (root / "manifest.csv").exists():
        raise ValidationError(f"corpus missing: {root} (run generate-data first)")
    meta = json.loads((root.parent / "corpus.json").read_text())
    result = load_paired_dataset(root, site_id, normalization=meta.get("normalization", "minmax"))
    if result.skipped_count:
        log.warning("%s: %d unmatched files skipped", root, result.skipped_count)
    res = {p.shape for p in result.pairs}
    if res != {(cfg.resolution, cfg.resolution)}:
        raise ValidationError(f"{root}: image size {sorted(res)} does not match resolution {cfg.resolution}")
    return result.pairs


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate_data(cfg: ExperimentConfig) -> dict[str, Path]:
    written = {}
    for k, profile in enumerate(cfg.sites):
        train, test = generate_site_dataset(
            profile, cfg.n_train, cfg.n_test, cfg.resolution, cfg.data_seed + k
        )
        for split, pairs in (("train", train), ("test", test)):
            written[f"{profile.site_id}/{split}"] = write_corpus(corpus_dir(cfg, profile.site_id, split), pairs)
        meta = {
            "site": profile.to_dict(),
            "seed": cfg.data_seed + k,
            "resolution": cfg.resolution,
            "n_train": cfg.n_train,
            "n_test": cfg.n_test,
            # PNGs hold the [0,1] values directly, so loading divides by 65535
            "normalization": "scale",
        }
        (cfg.out_dir / "corpus" / f"site_{profile.site_id}" / "corpus.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True)
        )
        log.info("site %s: %d train + %d test pairs", profile.site_id, len(train), len(test))
    return written


def _mode_datasets(cfg: ExperimentConfig, mode: str):
    a, b = (s.site_id for s in cfg.sites)
    train_a = _load_split(cfg, a, "train")
    train_b = _load_split(cfg, b, "train")
    if mode == "baseline-a":
        return [mode], [train_a]
    if mode == "baseline-b":
        return [mode], [train_b]
    if mode == "central":
        return [mode], [concat_datasets(train_a, train_b)]
    if mode == "federated":
        return [a, b], [train_a, train_b]
    raise ValidationError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")


def _latest_checkpoint(ckpt_dir: Path) -> Path | None:
    found = sorted(ckpt_dir.glob("round_*.ckpt"))
    return found[-1] if found else None


def cmd_train(cfg: ExperimentConfig, mode: str, fresh: bool = False, stop_after: int | None = None) -> Path:
    """Train one of the four models; resumes from the newest round checkpoint.

    ``stop_after`` ends the run early after that many rounds (used to
    exercise resumption).  Returns the path of ``final.ckpt`` (or of the last
    round checkpoint when stopped early).
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    _set_determinism(cfg)
    ids, datasets = _mode_datasets(cfg, mode)
    rdir = run_dir(cfg, mode)
    ckpt_dir = rdir / "checkpoints"
    if fresh and rdir.exists():
        for p in list(ckpt_dir.glob("*.ckpt")) + [rdir / "epochs.csv", rdir / "rounds.jsonl", rdir / "final.ckpt"]:
            if p.exists():
                p.unlink()
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "config.json").write_text(cfg.to_json())

    hyper = cfg.hyper
    clients = [
        make_client(cid, ds, cfg.generator_config(), cfg.discriminator_config(), hyper, hyper.seed)
        for cid, ds in zip(ids, datasets)
    ]
    start = 0
    latest = _latest_checkpoint(ckpt_dir)
    if latest is not None:
        start = restore_federation_checkpoint(latest, clients)
        log.info("%s: resuming from %s at round %d", mode, latest.name, start)

    epochs_csv = rdir / "epochs.csv"
    if start == 0 or not epochs_csv.exists():
        epochs_csv.write_text("client," + EpochStats.CSV_HEADER + "\n")
        (rdir / "rounds.jsonl").write_text("")
    else:
        # drop log lines written after the checkpoint we resumed from
        lines = epochs_csv.read_text().splitlines(keepends=True)
        keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",")[1]) < start]
        epochs_csv.write_text("".join(keep))
        rounds = (rdir / "rounds.jsonl").read_text().splitlines(keepends=True)
        (rdir / "rounds.jsonl").write_text(
            "".join(ln for ln in rounds if json.loads(ln)["round_index"] < start)
        )

    remaining = hyper.total_epochs - start
    if stop_after is not None:
        remaining = min(remaining, stop_after)
    final = rdir / "final.ckpt"
    if remaining <= 0:
        log.info("%s: already trained", mode)
        if not final.exists():
            checkpoint.save(
                final,
                {"generator": export_parameters(clients[0].generator),
                 "discriminator": export_parameters(clients[0].discriminator)},
                {"mode": mode, "config": cfg.to_dict(), "epoch": hyper.total_epochs - 1},
            )
        return final

    with epochs_csv.open("a") as log_f:

        def epoch_log(r: int, cid: str, st: EpochStats) -> None:
            log_f.write(f"{cid},{st.csv_line()}\n")
            log_f.flush()
            log.info("%s %s epoch %d lr=%.3g g=%.4f d=%.4f l1=%.4f", mode, cid, st.epoch, st.lr_used, st.mean_g_loss, st.mean_d_loss, st.mean_l1)

        meta = {"mode": mode, "config": cfg.to_dict(), "version": version_stamp(), "seed": hyper.seed}
        (g, d), _ = run_federated_training(
            clients,
            remaining,
            start_round=start,
            checkpoint_dir=ckpt_dir,
            checkpoint_every=cfg.checkpoint_every,
            round_log=rdir / "rounds.jsonl",
            epoch_log=epoch_log,
            metadata=meta,
            weighting=cfg.weighting,
            aggregate_discriminator=cfg.aggregate_discriminator,
            parallel=not cfg.deterministic,
        )
    if start + remaining < hyper.total_epochs:
        return _latest_checkpoint(ckpt_dir)
    checkpoint.save(final, {"generator": g, "discriminator": d}, {**meta, "epoch": hyper.total_epochs - 1})
    return final


def _load_generator(cfg: ExperimentConfig, mode: str):
    path = run_dir(cfg, mode) / "final.ckpt"
    if not path.exists():
        raise ValidationError(f"missing checkpoint for {mode}: {path} (run `train --mode {mode}`)")
    sets, _ = checkpoint.load(path)
    gen = build_generator(cfg.generator_config(), 0)
    import_parameters(gen, sets["generator"])
    gen.eval()
    return gen


def write_montage(path: Path, test, generators: dict, rows: int) -> int:
    """Rows of: source | target | one synthetic image per model.  Returns the row count."""
    rows = min(rows, len(test))
    r = test[0].shape[0]
    gap = 2
    cols = 2 + len(generators)
    canvas = np.ones((rows * (r + gap) - gap, cols * (r + gap) - gap), dtype=np.float64)
    with torch.no_grad():
        for i, pair in enumerate(test[:rows]):
            tiles = [pair.source, pair.target]
            x = torch.from_numpy(to_model_range(pair.source.astype(np.float32)))[None, None]
            for gen in generators.values():
                tiles.append(np.clip(from_model_range(gen(x)[0, 0].double().numpy()), 0, 1))
            for j, tile in enumerate(tiles):
                canvas[i * (r + gap) : i * (r + gap) + r, j * (r + gap) : j * (r + gap) + r] = tile
    Image.fromarray(np.round(canvas * 255).astype(np.uint8)).save(path)
    return rows


def cmd_compare(cfg: ExperimentConfig) -> ComparisonReport:
    _set_determinism(cfg)
    gens = {m: _load_generator(cfg, m) for m in MODES}
    tests = {}
    for label, profile in zip(("A", "B"), cfg.sites):
        tests[label] = _load_split(cfg, profile.site_id, "test")
    scores = {m: {t: evaluate_model(g, tests[t]) for t in tests} for m, g in gens.items()}
    pair_ids = {t: [p.pair_id for p in ps] for t, ps in tests.items()}
    report = build_report(scores, pair_ids, config=cfg.to_dict(), version=version_stamp())

    out = cfg.out_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table_text())
    (out / "ssim_per_pair.csv").write_text(report.per_pair_csv())
    for t, ps in tests.items():
        write_montage(out / f"montage_{t}.png", ps, gens, cfg.montage_rows)
    return report


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="training / initialisation seed")
    common.add_argument("--resolution", type=int)
    common.add_argument("--epochs", type=int, help="total epochs (= federation rounds)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedsynth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="write the synthetic two-site corpora")
    t = sub.add_parser("train", parents=[common], help="train one of the four models")
    t.add_argument("--mode", required=True, choices=MODES)
    t.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    sub.add_parser("compare", parents=[common], help="evaluate all four models and write the report")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed,
            total_epochs=args.epochs,
            resolution=args.resolution,
            deterministic=args.deterministic,
            out=args.out,
        )
        if args.command == "generate-data":
            cmd_generate_data(cfg)
        elif args.command == "train":
            path = cmd_train(cfg, args.mode, fresh=args.fresh)
            print(path)
        else:
            report = cmd_compare(cfg)
            print(report.table_text(), end="")
    except (ConfigError, ValidationError, CorpusError) as exc:
        print(f"fedsynth: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported, mapped to exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"fedsynth: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
