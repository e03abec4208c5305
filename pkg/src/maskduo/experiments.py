"""End-to-end experiment orchestration.

Each entry point takes a ``RunConfig`` and an output directory and
leaves behind everything needed to reproduce or audit the run: the
frozen config as YAML, the git revision, a JSON-lines metrics stream,
and checkpoint archives.  Sweeps append one CSV row per cell as cells
finish, so an interrupted sweep resumes by skipping rows that already
exist; a failing cell is recorded and the sweep moves on.
"""

from __future__ import annotations

import csv
import json
import subprocess
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .audio import (
    AudioConfig,
    StatsAccumulator,
    cache_spectrograms,
    crop_or_pad,
    log_mel_spectrogram,
    normalize,
    read_manifest,
)
from .config import RunConfig, resolve_cache_dir, save_config
from .evaluation import (
    FINETUNE_PRESETS,
    FinetuneConfig,
    FinetuneResult,
    ProbeResult,
    finetune,
    train_linear_probe,
)
from .features import extract_clip_features
from .patches import ShapeSpec, positional_encoding
from .synthetic import BandCorpusConfig, make_band_corpus
from .training import DuoTrainer, derive_seed, load_encoder

__all__ = [
    "DataBundle",
    "prepare_data",
    "run_pretrain",
    "run_probe",
    "run_finetune",
    "run_sweep",
    "write_report",
    "SWEEP_GRIDS",
]


@dataclass
class DataBundle:
    """Normalized fixed-size spectrograms ready for the model grid."""

    train_specs: np.ndarray
    train_labels: np.ndarray
    test_specs: np.ndarray
    test_labels: np.ndarray
    n_classes: int
    stats_mean: float
    stats_std: float


def _git_revision(cwd=None) -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, cwd=cwd, timeout=10
        )
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


def prepare_data(cfg: RunConfig, cache_dir=None) -> DataBundle:
    """Produce model-grid spectrograms for the configured corpus.

    Normalization statistics come from the train split only; crops that
    fit clips to the grid are seeded from the run seed, so the bundle is
    a pure function of the config.
    """
    audio_cfg: AudioConfig = cfg.audio
    if cfg.data.kind == "synthetic_bands":
        corpus_cfg = BandCorpusConfig(
            n_classes=cfg.data.n_classes,
            clips_per_class=cfg.data.clips_per_class,
            clip_seconds=cfg.data.clip_seconds,
            sample_rate=audio_cfg.sample_rate,
            snr_db=cfg.data.snr_db,
            test_fraction=cfg.data.test_fraction,
            seed=cfg.train.seed,
        )
        raw = [
            (log_mel_spectrogram(waveform, audio_cfg), label, split)
            for waveform, label, split in make_band_corpus(corpus_cfg)
        ]
        n_classes = corpus_cfg.n_classes
    else:
        entries = read_manifest(cfg.data.manifest)
        cache = cache_dir if cache_dir is not None else resolve_cache_dir(cfg)
        paths, _ = cache_spectrograms(entries, audio_cfg, cache, root=cfg.data.root)
        names = sorted({e.label for e in entries})
        to_idx = {name: i for i, name in enumerate(names)}
        raw = [(np.load(paths[e.path]), to_idx[e.label], e.split) for e in entries]
        n_classes = len(names)

    acc = StatsAccumulator()
    for spec, _, split in raw:
        if split == "train":
            acc.add(spec)
    stats = acc.finalize()

    train_x, train_y, test_x, test_y = [], [], [], []
    for idx, (spec, label, split) in enumerate(raw):
        rng = np.random.default_rng(derive_seed(cfg.train.seed, 7, idx))
        fitted = crop_or_pad(normalize(spec, stats), cfg.grid.n_frames, rng)
        if split == "train":
            train_x.append(fitted)
            train_y.append(label)
        else:
            test_x.append(fitted)
            test_y.append(label)
    if not train_x or not test_x:
        raise ValueError("corpus must contain both train and test clips")
    return DataBundle(
        train_specs=np.stack(train_x),
        train_labels=np.asarray(train_y, dtype=np.int64),
        test_specs=np.stack(test_x),
        test_labels=np.asarray(test_y, dtype=np.int64),
        n_classes=n_classes,
        stats_mean=stats.mean,
        stats_std=stats.std,
    )


def _model_shape(cfg: RunConfig) -> ShapeSpec:
    return ShapeSpec.for_grid(cfg.grid.n_mels, cfg.grid.n_frames, cfg.grid.patch_size, cfg.encoder.width)


def _freeze_run_context(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.yaml")
    (out_dir / "provenance.json").write_text(
        json.dumps({"git_revision": _git_revision(), "seed": cfg.train.seed}, indent=2) + "\n"
    )


def run_pretrain(cfg: RunConfig, out_dir=None, data: DataBundle | None = None) -> dict:
    """Pre-train on the train split; writes encoder/trainer archives.

    Returns a summary dict with output paths and the loss trajectory
    endpoints.  Batch order and per-clip crops are deterministic in the
    seed, so rerunning the same config reproduces the same numbers.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    _freeze_run_context(cfg, out)
    if data is None:
        data = prepare_data(cfg)
    shape = _model_shape(cfg)
    n = data.train_specs.shape[0]
    batch_size = min(cfg.train.batch_size, n)
    steps_per_epoch = max(1, (n + batch_size - 1) // batch_size)
    trainer = DuoTrainer(
        shape,
        1,
        cfg.encoder,
        cfg.predictor,
        cfg.train,
        steps_per_epoch=steps_per_epoch,
        out_dir=out,
        metrics_path=out / "metrics.jsonl",
        preprocess_meta={
            "stats_mean": data.stats_mean,
            "stats_std": data.stats_std,
            "audio": asdict(cfg.audio),
            "grid": asdict(cfg.grid),
        },
    )
    first_loss = None
    last = None
    for epoch in range(cfg.train.epochs):
        order = np.random.default_rng(derive_seed(cfg.train.seed, 11, epoch)).permutation(n)
        for start in range(0, n, batch_size):
            batch = data.train_specs[order[start : start + batch_size]]
            last = trainer.training_step(batch)
            if first_loss is None:
                first_loss = last.loss
    encoder_path = trainer.export_encoder(out / "encoder.npz")
    trainer_path = trainer.save_checkpoint(out / "trainer.npz")
    summary = {
        "steps": trainer.step,
        "first_loss": first_loss,
        "final_loss": last.loss if last else None,
        "target_feature_var": last.target_feature_var if last else None,
        "encoder": str(encoder_path),
        "trainer": str(trainer_path),
        "metrics": str(out / "metrics.jsonl"),
    }
    (out / "pretrain_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _tokenizer(shape: ShapeSpec, dtype=torch.float32):
    from .patches import InputGrid, partition

    def tokenize(specs: np.ndarray) -> torch.Tensor:
        rows = [partition(InputGrid(s), shape.patch_size, dim=shape.dim).tokens for s in specs]
        return torch.from_numpy(np.stack(rows)).to(dtype)

    return tokenize


def run_probe(
    cfg: RunConfig, encoder_path=None, out_dir=None, data: DataBundle | None = None
) -> ProbeResult:
    """Linear probe on frozen clip features.

    ``encoder_path = None`` probes a randomly initialized encoder (the
    control arm for "did pre-training learn anything"), seeded from the
    run seed.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = prepare_data(cfg)
    if encoder_path is not None:
        encoder, shape, _ = load_encoder(encoder_path)
    else:
        from .backbone import PatchEncoder

        shape = _model_shape(cfg)
        torch.manual_seed(cfg.train.seed)
        encoder = PatchEncoder(shape.patch_size**2, cfg.encoder)
        encoder.eval()
    positions = torch.from_numpy(positional_encoding(shape)).float()
    tokenize = _tokenizer(shape)
    train_specs, train_labels = data.train_specs, data.train_labels
    k = cfg.data.probe_clips_per_class
    if k is not None:
        keep = np.concatenate(
            [np.where(train_labels == c)[0][:k] for c in range(data.n_classes)]
        )
        train_specs, train_labels = train_specs[keep], train_labels[keep]
    train_feats = extract_clip_features(encoder, shape, positions, tokenize(train_specs))
    test_feats = extract_clip_features(encoder, shape, positions, tokenize(data.test_specs))
    result = train_linear_probe(
        train_feats.numpy(), train_labels, test_feats.numpy(), data.test_labels,
        data.n_classes, cfg.probe,
    )
    payload = {
        "encoder": str(encoder_path) if encoder_path is not None else "random_init",
        "train_top1": result.train_top1,
        "test_top1": result.test_top1,
        "test_map": result.test_map,
        "feature_dim": int(train_feats.shape[1]),
    }
    (out / "probe.json").write_text(json.dumps(payload, indent=2) + "\n")
    return result


def run_finetune(
    cfg: RunConfig,
    encoder_path,
    preset: str = "esc50",
    out_dir=None,
    data: DataBundle | None = None,
    overrides: FinetuneConfig | None = None,
) -> FinetuneResult:
    """Fine-tune an exported encoder with one of the benchmark presets."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if preset not in FINETUNE_PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choices: {sorted(FINETUNE_PRESETS)}")
    ft_cfg = overrides if overrides is not None else FINETUNE_PRESETS[preset]
    if data is None:
        data = prepare_data(cfg)
    encoder, shape, _ = load_encoder(encoder_path)
    positions = torch.from_numpy(positional_encoding(shape)).float()
    result = finetune(
        encoder,
        shape,
        positions,
        _tokenizer(shape),
        data.train_specs,
        data.train_labels,
        data.test_specs,
        data.test_labels,
        data.n_classes,
        ft_cfg,
    )
    payload = {
        "preset": preset,
        "test_top1": result.test_top1,
        "test_map": result.test_map,
        "final_train_loss": result.train_losses[-1] if result.train_losses else None,
    }
    (out / f"finetune_{preset}.json").write_text(json.dumps(payload, indent=2) + "\n")
    return result


# ----- sweeps -------------------------------------------------------------------

SWEEP_GRIDS = {
    "masking_ratio": [
        {"masking_ratio": r, "target_input": "masked_only"} for r in (0.5, 0.6, 0.7, 0.8)
    ],
    "target_input": [
        {"masking_ratio": r, "target_input": mode}
        for mode in ("masked_only", "all_patches")
        for r in (0.6, 0.7)
    ],
}

_CSV_FIELDS = [
    "sweep",
    "cell",
    "masking_ratio",
    "target_input",
    "status",
    "steps",
    "final_loss",
    "probe_top1",
    "probe_map",
    "seed",
    "error",
]


def _cell_id(spec: dict) -> str:
    return f"r{spec['masking_ratio']:.2f}_{spec['target_input']}"


def _completed_cells(csv_path: Path) -> set[str]:
    if not csv_path.exists():
        return set()
    with open(csv_path, newline="") as fh:
        return {row["cell"] for row in csv.DictReader(fh) if row.get("status") == "ok"}


def run_sweep(sweep: str, cfg: RunConfig, out_dir=None, resume: bool = False) -> dict:
    """Run every cell of a named grid; one CSV row and subdir per cell.

    Returns ``{"csv": ..., "plot": ..., "failures": [...]}``.  With
    ``resume=True`` cells already recorded as ok are skipped.  A cell
    that raises is recorded with its error and the sweep continues.
    """
    if sweep not in SWEEP_GRIDS:
        raise ValueError(f"unknown sweep {sweep!r}; choices: {sorted(SWEEP_GRIDS)}")
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    done = _completed_cells(csv_path) if resume else set()
    if not resume and csv_path.exists():
        csv_path.unlink()
    write_header = not csv_path.exists()
    failures = []
    with open(csv_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        if write_header:
            writer.writeheader()
        for spec in SWEEP_GRIDS[sweep]:
            cell = _cell_id(spec)
            if cell in done:
                continue
            row = {
                "sweep": sweep,
                "cell": cell,
                "masking_ratio": spec["masking_ratio"],
                "target_input": spec["target_input"],
                "seed": cfg.train.seed,
                "error": "",
            }
            cell_cfg = _with_train_overrides(cfg, spec)
            cell_dir = out / "cells" / cell
            try:
                data = prepare_data(cell_cfg)
                summary = run_pretrain(cell_cfg, out_dir=cell_dir, data=data)
                probe = run_probe(cell_cfg, summary["encoder"], out_dir=cell_dir, data=data)
                row.update(
                    status="ok",
                    steps=summary["steps"],
                    final_loss=f"{summary['final_loss']:.6f}",
                    probe_top1=f"{probe.test_top1:.4f}",
                    probe_map=f"{probe.test_map:.4f}",
                )
            except Exception as exc:  # noqa: BLE001 - cell isolation is the point
                row.update(status="failed", steps="", final_loss="", probe_top1="", probe_map="")
                row["error"] = f"{type(exc).__name__}: {exc}"
                failures.append(cell)
            writer.writerow(row)
            fh.flush()
    plot_path = _plot_sweep(csv_path, out / "sweep.png")
    return {"csv": str(csv_path), "plot": str(plot_path), "failures": failures}


def _with_train_overrides(cfg: RunConfig, spec: dict) -> RunConfig:
    from dataclasses import replace

    return replace(cfg, train=replace(cfg.train, **spec))


def _read_rows(csv_path: Path) -> list[dict]:
    with open(csv_path, newline="") as fh:
        return list(csv.DictReader(fh))


def _plot_sweep(csv_path: Path, plot_path: Path) -> Path:
    rows = [r for r in _read_rows(csv_path) if r["status"] == "ok"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for mode in sorted({r["target_input"] for r in rows}):
        sub = sorted((r for r in rows if r["target_input"] == mode), key=lambda r: float(r["masking_ratio"]))
        xs = [float(r["masking_ratio"]) for r in sub]
        axes[0].plot(xs, [float(r["probe_top1"]) for r in sub], marker="o", label=mode)
        axes[1].plot(xs, [float(r["final_loss"]) for r in sub], marker="o", label=mode)
    axes[0].set_xlabel("masking ratio")
    axes[0].set_ylabel("probe top-1")
    axes[1].set_xlabel("masking ratio")
    axes[1].set_ylabel("final training loss")
    for ax in axes:
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)
    return plot_path


def write_report(out_dir) -> Path:
    """Summarize a sweep directory's CSV into a markdown report.

    Directional comparisons are stated as observations from this run,
    not asserted as guarantees; desk-scale results are noisy.
    """
    out = Path(out_dir)
    csv_path = out / "results.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"no results.csv under {out}")
    rows = _read_rows(csv_path)
    ok = [r for r in rows if r["status"] == "ok"]
    failed = [r for r in rows if r["status"] != "ok"]

    lines = ["# Sweep report", ""]
    lines.append(f"Cells: {len(rows)} total, {len(ok)} ok, {len(failed)} failed.")
    lines.append("")
    lines.append("| cell | ratio | target input | final loss | probe top-1 | probe mAP |")
    lines.append("|---|---|---|---|---|---|")
    for r in sorted(ok, key=lambda r: (r["target_input"], float(r["masking_ratio"]))):
        lines.append(
            f"| {r['cell']} | {r['masking_ratio']} | {r['target_input']} | "
            f"{r['final_loss']} | {r['probe_top1']} | {r['probe_map']} |"
        )
    if failed:
        lines.append("")
        lines.append("## Failed cells")
        for r in failed:
            lines.append(f"- {r['cell']}: {r['error']}")

    if ok:
        best = max(ok, key=lambda r: float(r["probe_top1"]))
        lines.append("")
        lines.append("## Observations")
        lines.append(
            f"- Best probe top-1 in this run: {best['probe_top1']} at ratio "
            f"{best['masking_ratio']} ({best['target_input']})."
        )
        modes = {r["target_input"] for r in ok}
        if len(modes) > 1:
            for ratio in sorted({r["masking_ratio"] for r in ok}):
                pair = {r["target_input"]: r for r in ok if r["masking_ratio"] == ratio}
                if len(pair) == 2:
                    m, a = pair["masked_only"], pair["all_patches"]
                    direction = ">" if float(m["probe_top1"]) > float(a["probe_top1"]) else "<="
                    lines.append(
                        f"- At ratio {ratio}: masked-only targets {m['probe_top1']} "
                        f"{direction} all-patches targets {a['probe_top1']} (this run only)."
                    )
    if (out / "sweep.png").exists():
        lines.append("")
        lines.append("![sweep](sweep.png)")
    lines.append("")
    report = out / "report.md"
    report.write_text("\n".join(lines))
    return report
