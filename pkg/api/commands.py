# polarseg/api/commands.py
"""
Subcommand handlers. Each handler takes the effective CliConfig, validates and loads
everything it needs before writing, and returns a JSON-friendly summary.
"""
from pathlib import Path
from typing import Any, Callable, Dict, List, Tuple

from api.models import (
    ChannelKind,
    CliConfig,
    ClassSchema,
    ExperimentPreset,
    ModalityMode,
    PlaneKind,
    Sample,
    SyntheticSceneConfig,
)
from api.presets import CLASS_SCHEMAS, build_config, get_preset, get_schema
from config import logger
from core.errors import InputValidationError, VerificationFailedError
from nn.eafnet import EAFNet
from services.attention_service import collect_attention, plot_attention_curves
from services.checkpoint_service import checkpoint_load
from services.dataset_service import branch_inputs, histogram, load_split
from services.evaluation_service import evaluate, predict
from services.synthetic_service import export_dataset, synthesize_dataset
from services.training_service import train
from services.verification_service import run_verification
from utils.image_io import aolp_preview, dolp_preview, write_palette_png, write_preview_png
from utils.pder import save_derived
from utils.reports import (
    write_attention_csv,
    write_channel_attention_csv,
    write_metrics_csv,
    write_stats_csv,
)

Summary = Dict[str, Any]


# --- shared helpers ----------------------------------------------------------

def _cli_schema(cfg: CliConfig) -> ClassSchema:
    return get_schema(cfg.schema_name or "zju-rgbp")


def _scene(cfg: CliConfig, schema: ClassSchema) -> SyntheticSceneConfig:
    if cfg.scene is not None:
        return cfg.scene
    name = cfg.scene_preset or ("obstacle" if schema.name == "lost-and-found" else "default")
    return SyntheticSceneConfig.preset(name, seed=cfg.seed)


def _split_samples(cfg: CliConfig, split: str, mode: ModalityMode, schema: ClassSchema) -> List[Sample]:
    if cfg.synthetic:
        count = cfg.synthetic_train if split == "train" else cfg.synthetic_val
        return synthesize_dataset(_scene(cfg, schema), count, prefix=split)
    if cfg.root is None:
        raise InputValidationError("Either --root or --synthetic is required")
    return load_split(cfg.root, split, mode, schema.num_classes)


def _schema_for(cfg: CliConfig, num_classes: int) -> ClassSchema:
    if cfg.schema_name is not None:
        schema = get_schema(cfg.schema_name)
    else:
        matches = [s for s in CLASS_SCHEMAS.values() if s.num_classes == num_classes]
        if not matches:
            raise InputValidationError(f"No class schema with {num_classes} classes; pass --schema")
        schema = matches[0]
    if schema.num_classes != num_classes:
        raise InputValidationError(f"Schema '{schema.name}' has {schema.num_classes} classes, model has {num_classes}")
    return schema


def _load_checkpoint(cfg: CliConfig) -> Tuple[EAFNet, ClassSchema, ModalityMode]:
    if cfg.checkpoint is None:
        raise InputValidationError("--checkpoint is required")
    model = checkpoint_load(cfg.checkpoint)
    schema = _schema_for(cfg, model.cfg.num_classes)
    mode = ExperimentPreset(name="checkpoint", branches=model.cfg.branches).modality_mode()
    return model, schema, mode


def _out(cfg: CliConfig, *parts: str) -> Path:
    path = Path(cfg.out).joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- commands ----------------------------------------------------------------

def cmd_derive(cfg: CliConfig) -> Summary:
    """PDER files and previews of every derived plane of `mode`."""
    samples = _split_samples(cfg, cfg.split, cfg.mode, _cli_schema(cfg))
    written = 0
    for sample in samples:
        target = _out(cfg, "derived", cfg.split, sample.id)
        for kind in sample.kinds:
            save_derived(sample.plane(kind), target / f"{kind.value}.pder")
            written += 1
            if kind == PlaneKind.AOLP:
                write_preview_png(target / "aolp.png", aolp_preview(sample.plane(kind) * 180.0))
            elif kind == PlaneKind.DOLP:
                write_preview_png(target / "dolp.png", dolp_preview(sample.plane(kind)))
    logger.info(f"Derived {written} planes for {len(samples)} samples into {Path(cfg.out) / 'derived' / cfg.split}")
    return {"samples": len(samples), "planes": written}


def cmd_stats(cfg: CliConfig) -> Summary:
    kind = ChannelKind(cfg.kind)
    mode = cfg.mode if kind == ChannelKind.S0 else ModalityMode(kind.value)
    stats = histogram(_split_samples(cfg, cfg.split, mode, _cli_schema(cfg)), kind, cfg.bins)
    path = write_stats_csv(_out(cfg) / f"stats_{kind.value}.csv", stats)
    logger.info(f"Wrote {path}: {stats.total} pixels, {stats.fraction_below(0.4):.3f} below 0.4")
    return {"csv": str(path), "total": stats.total, "fraction_below_0.4": stats.fraction_below(0.4)}


def cmd_synth(cfg: CliConfig) -> Summary:
    """Write train and val synthetic scenes into the dataset layout under --root (or <out>/synthetic)."""
    scene = _scene(cfg, _cli_schema(cfg))
    root = Path(cfg.root) if cfg.root is not None else Path(cfg.out) / "synthetic"
    train_dirs = export_dataset(scene, root, "train", cfg.synthetic_train)
    val_dirs = export_dataset(scene, root, "val", cfg.synthetic_val)
    return {"root": str(root), "train": len(train_dirs), "val": len(val_dirs)}


def cmd_run(cfg: CliConfig) -> Summary:
    if cfg.preset is None:
        raise InputValidationError("run needs a preset name")
    preset = get_preset(cfg.preset)
    schema = get_schema(cfg.schema_name or preset.schema_name)
    train_cfg = cfg.train.model_copy(update={"seed": cfg.seed})
    model_cfg = build_config(preset, schema, widths=cfg.widths, blocks_per_stage=cfg.blocks_per_stage,
                             decoder_width=cfg.decoder_width, input_size=train_cfg.crop, seed=cfg.seed)
    mode = preset.modality_mode()
    train_samples = _split_samples(cfg, "train", mode, schema)
    val_samples = _split_samples(cfg, "val", mode, schema)

    run_dir = _out(cfg, preset.slug)
    (run_dir / "config.json").write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    result = train(model_cfg, schema, train_samples, val_samples, train_cfg, out_dir=run_dir)
    metrics_path = write_metrics_csv(run_dir / "metrics.csv", result.final_report)
    logger.info(f"Run {preset.name} finished: final mIoU={result.final_report.miou} best={result.best_miou}")
    return {"preset": preset.name, "run_dir": str(run_dir), "metrics": str(metrics_path),
            "miou": result.final_report.miou, "best_miou": result.best_miou}


def cmd_eval(cfg: CliConfig) -> Summary:
    model, schema, mode = _load_checkpoint(cfg)
    samples = _split_samples(cfg, cfg.split, mode, schema)
    report = evaluate(model, samples, schema, cfg.train.eval_shards, cfg.train.ignore_background_in_miou)
    path = write_metrics_csv(_out(cfg, "eval") / "metrics.csv", report)
    return {"metrics": str(path), "miou": report.miou}


def cmd_infer(cfg: CliConfig) -> Summary:
    """Indexed-palette segmentation PNG per sample."""
    model, schema, mode = _load_checkpoint(cfg)
    samples = _split_samples(cfg, cfg.split, mode, schema)
    target = _out(cfg, "infer", cfg.split)
    for sample in samples:
        prediction = predict(model, branch_inputs([sample], model.cfg.branches))[0]
        write_palette_png(target / f"{sample.id}.png", prediction)
    logger.info(f"Wrote {len(samples)} segmentation maps to {target}")
    return {"dir": str(target), "samples": len(samples)}


def cmd_attn(cfg: CliConfig) -> Summary:
    model, schema, mode = _load_checkpoint(cfg)
    samples = _split_samples(cfg, cfg.split, mode, schema)
    report = collect_attention(model, samples, cfg.attention_stage, cfg.attention_channels)
    target = _out(cfg, "attention")
    write_attention_csv(target / "attention.csv", report.records)
    write_channel_attention_csv(target / "attention_channels.csv", report.channels)
    plot_attention_curves(report, target / "attention_curves.png")
    return {"dir": str(target), "records": len(report.records)}


def cmd_verify(cfg: CliConfig) -> Summary:
    results = run_verification(cfg.checks)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} {r.seconds:8.3f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailedError(failed)
    return {"checks": len(results), "failed": 0}


COMMANDS: Dict[str, Callable[[CliConfig], Summary]] = {
    "derive": cmd_derive,
    "stats": cmd_stats,
    "synth": cmd_synth,
    "run": cmd_run,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "attn": cmd_attn,
    "verify": cmd_verify,
}
