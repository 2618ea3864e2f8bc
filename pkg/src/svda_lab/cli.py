"""``svda-lab`` command line: gen, train, eval, diagnose, compare."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import Mechanism
from .datagen import DatasetSpec, SceneError, generate_scene, load_manifest, save_pair, write_manifest
from .harness import (
    METRIC_NAMES,
    DepthDataset,
    EpochLog,
    EvaluationError,
    TrainConfig,
    TrainingDiverged,
    compare,
    evaluate,
    train,
)
from .indicators import (
    DEFAULT_DRAWS,
    DEFAULT_NOISE_STD,
    DEFAULT_SPARSITY_EPS,
    INDICATOR_NAMES,
    RobustnessSpec,
    alignment_values,
    per_sample_values,
)
from .model import CheckpointError, ConfigError, DepthViT, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import no_grad

log = logging.getLogger("svda_lab")

EPOCHS_HEADER = ("epoch", "train_loss", "val_loss") + METRIC_NAMES
INDICATORS_HEADER = ("epoch", "layer", "head", "indicator", "value")
METRICS_HEADER = ("mechanism", "checkpoint") + METRIC_NAMES
LAYERWISE_HEADER = ("layer", "head", "indicator", "min", "q25", "median", "q75", "max")
ALIGNMENT_HEADER = ("layer", "head", "p05", "p50", "p95")
TRENDS_HEADER = ("mechanism", "indicator", "first10_mean", "last10_mean", "delta")

CHECKPOINT_NAME = "checkpoint.svda"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    output_dir: str = "runs/default"


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict) -> RunConfig:
    """Strict parse: unknown keys anywhere are errors, omitted keys take defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(raw) - {"model", "train", "data", "output_dir"})
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    try:
        data = _build(DatasetSpec, raw.get("data", {}), "data")
    except SceneError as exc:
        raise ConfigError(f"data: {exc}") from None
    return RunConfig(
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        data=data,
        output_dir=str(raw.get("output_dir", RunConfig.output_dir)),
    )


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw)


def dump_config(cfg: RunConfig) -> str:
    raw = asdict(cfg)
    raw["model"]["mechanism"] = cfg.model.mechanism.value
    return json.dumps(raw, indent=2, sort_keys=True)


# -- csv ---------------------------------------------------------------
def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def epoch_rows(logs: list[EpochLog]):
    for e in logs:
        yield (e.epoch, e.train_loss, e.val_loss, *e.val_metrics.as_tuple())


def indicator_rows(logs: list[EpochLog]):
    for e in logs:
        for s in e.indicators:
            if s.value is not None:
                yield (s.epoch, s.layer, s.head, s.name, s.value)


# -- commands ----------------------------------------------------------
def _out_dir(cfg: RunConfig, override) -> Path:
    out = Path(override if override is not None else cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def cmd_gen(cfg: RunConfig, out: Path) -> Path:
    """Write train scenes and ``manifest.tsv``; validation scenes go to ``val_manifest.tsv``."""
    spec = cfg.data
    scene_dir = out / "scenes"
    scene_dir.mkdir(parents=True, exist_ok=True)
    splits = {"manifest.tsv": range(spec.count)}
    if spec.val_count:
        splits["val_manifest.tsv"] = range(spec.count, spec.count + spec.val_count)
    for manifest, indices in splits.items():
        pairs = []
        for i in indices:
            img, dep = f"scenes/{i:06d}_image.tnsr", f"scenes/{i:06d}_depth.tnsr"
            save_pair(out / img, out / dep, generate_scene(spec, i))
            pairs.append((img, dep))
        write_manifest(out / manifest, pairs)
    return out / "manifest.tsv"


def _write_run(out: Path, model: DepthViT, result) -> None:
    best = DepthViT(model.cfg, params=model.params)
    best.load_state(result.best_state)
    save_checkpoint(out / CHECKPOINT_NAME, best)
    write_csv(out / "epochs.csv", EPOCHS_HEADER, epoch_rows(result.logs))
    write_csv(out / "indicators.csv", INDICATORS_HEADER, indicator_rows(result.logs))


def cmd_train(cfg: RunConfig, out: Path):
    train_set = DepthDataset.from_spec(cfg.data, "train")
    val_set = DepthDataset.from_spec(cfg.data, "val")
    model = DepthViT(cfg.model, seed=cfg.train.seed)
    result = train(model, train_set, val_set, cfg.train)
    _write_run(out, model, result)
    (out / "config.json").write_text(dump_config(cfg) + "\n", encoding="utf-8")
    print(f"best epoch {result.best_epoch} (val abs_rel {result.logs[result.best_epoch - 1].val_metrics.abs_rel:.6f})")
    return result


def _dataset_from_manifest(path) -> DepthDataset:
    scenes = load_manifest(path)
    if not scenes:
        raise EvaluationError(f"{path}: manifest lists no scenes")
    return DepthDataset.from_scenes(scenes)


def cmd_eval(checkpoint, manifest, out: Path):
    model = load_checkpoint(checkpoint)
    metrics = evaluate(model, _dataset_from_manifest(manifest))
    row = (model.cfg.mechanism.value, Path(checkpoint).name, *metrics.as_tuple())
    write_csv(out / "metrics.csv", METRICS_HEADER, [row])
    print(" ".join(f"{h:>12}" for h in METRICS_HEADER))
    print(" ".join(f"{v:>12}" if isinstance(v, str) else f"{v:>12.6f}" for v in row))
    return metrics


def overhead_report(cfg: ModelConfig) -> tuple[int, int, float]:
    """(svda params, baseline params, extra percentage) for an architecture."""
    svda = DepthViT(cfg.with_mechanism(Mechanism.SVDA), seed=0).num_parameters()
    base = DepthViT(cfg.with_mechanism(Mechanism.BASELINE), seed=0).num_parameters()
    return svda, base, 100.0 * (svda - base) / base


def cmd_diagnose(checkpoint, manifest, out: Path, eps, noise_std, draws, seed: int = 0):
    """Per-(layer, head, indicator) five-number summaries over the manifest scenes."""
    model = load_checkpoint(checkpoint)
    data = _dataset_from_manifest(manifest)
    with no_grad():
        _, recs = model.forward(data.images, capture=True)
    spec = RobustnessSpec(model.attention_maps, model.embed(data.images), noise_std, draws, seed)
    table = per_sample_values(recs, eps, spec)
    rows = []
    for (layer, head), values in sorted(table.items()):
        for name in INDICATOR_NAMES:
            vals = values.get(name, [])
            if not vals or any(v is None for v in vals):
                continue
            q = np.percentile(np.asarray(vals, dtype=np.float64), [0, 25, 50, 75, 100])
            rows.append((layer, head, name, *(float(v) for v in q)))
    write_csv(out / "layerwise.csv", LAYERWISE_HEADER, rows)
    pooled = defaultdict(list)
    for r in recs:
        pooled[(r.layer_index, r.head_index)].append(alignment_values(r).ravel())
    align = [(*key, *np.percentile(np.concatenate(v), [5, 50, 95])) for key, v in sorted(pooled.items())]
    write_csv(out / "alignment.csv", ALIGNMENT_HEADER, align)
    svda, base, pct = overhead_report(model.cfg)
    print(f"parameters: svda {svda}, baseline {base}, extra {svda - base} ({pct:.4f}%)")
    return rows


def cmd_compare(cfg: RunConfig, out: Path):
    train_set = DepthDataset.from_spec(cfg.data, "train")
    val_set = DepthDataset.from_spec(cfg.data, "val")
    report = compare(cfg.model, train_set, val_set, cfg.train)
    rows = []
    for mech, result in report.results.items():
        run_dir = out / mech
        run_dir.mkdir(parents=True, exist_ok=True)
        model = DepthViT(cfg.model.with_mechanism(mech), seed=0)
        model.load_state(result.best_state)
        save_checkpoint(run_dir / CHECKPOINT_NAME, model)
        write_csv(run_dir / "epochs.csv", EPOCHS_HEADER, epoch_rows(result.logs))
        write_csv(run_dir / "indicators.csv", INDICATORS_HEADER, indicator_rows(result.logs))
        rows += [(mech, *r) for r in epoch_rows(result.logs)]
    write_csv(out / "compare_epochs.csv", ("mechanism",) + EPOCHS_HEADER, rows)
    write_csv(
        out / "trends.csv",
        TRENDS_HEADER,
        [(t.mechanism, t.indicator, t.first10_mean, t.last10_mean, t.delta) for t in report.trends],
    )
    svda, base = report.param_counts["svda"], report.param_counts["baseline"]
    print(f"parameters: svda {svda}, baseline {base}, extra {svda - base} ({100.0 * (svda - base) / base:.4f}%)")
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svda-lab", description=__doc__)
    p.add_argument("command", choices=("gen", "train", "eval", "diagnose", "compare"))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--checkpoint", help="checkpoint file (eval, diagnose)")
    p.add_argument("--manifest", help="tab-separated image/depth manifest (eval, diagnose)")
    p.add_argument("--eps", type=float, default=DEFAULT_SPARSITY_EPS, help="sparsity threshold")
    p.add_argument("--noise-std", type=float, default=DEFAULT_NOISE_STD)
    p.add_argument("--draws", type=int, default=DEFAULT_DRAWS)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ConfigError(f"--{n} is required for {args.command}")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cmd = args.command
    if cmd in ("gen", "train", "compare"):
        _require(args, "config")
        cfg = load_config(args.config)
        out = _out_dir(cfg, args.out)
        {"gen": cmd_gen, "train": cmd_train, "compare": cmd_compare}[cmd](cfg, out)
        return 0
    _require(args, "checkpoint", "manifest")
    out = _out_dir(RunConfig(output_dir="."), args.out)
    if cmd == "eval":
        cmd_eval(args.checkpoint, args.manifest, out)
    else:
        if args.eps <= 0 or args.noise_std < 0 or args.draws < 1:
            raise ConfigError("need --eps > 0, --noise-std >= 0, --draws >= 1")
        cmd_diagnose(args.checkpoint, args.manifest, out, args.eps, args.noise_std, args.draws)
    return 0


_ERROR_KINDS = (
    (ConfigError, "config"),
    (CheckpointError, "checkpoint"),
    (SceneError, "data"),
    (EvaluationError, "eval"),
    (TrainingDiverged, "diverged"),
    (OSError, "io"),
)


def main(argv=None) -> int:
    try:
        return run(argv)
    except tuple(k for k, _ in _ERROR_KINDS) as exc:
        kind = next(name for cls, name in _ERROR_KINDS if isinstance(exc, cls))
        msg = " ".join(str(exc).split())
        print(f"svda-lab: error[{kind}]: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
