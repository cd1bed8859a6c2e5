"""End-to-end campaign orchestration shared by the CLI commands.

A campaign generates volumes over six class slots per round: the healthy
baseline fills two slots and each defect type one, so n volumes per slot
yields 6n volumes of which 2n are healthy negatives (matching the detection
tables' 1:5 positive:negative ratio per defect class).  Volume i takes the
slot i mod 6 and the per-volume seed campaign_seed XOR i.

Stage outputs live in one dataset directory: hit/event CSVs, label grids and
geometry manifests from simulation; stream tensors and norm_stats.json from
featurization; split.json from splitting.  Training/evaluation runs write
into their own run directories with resolved configs for provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import __version__
from . import evaluation as ev
from . import features as ft
from . import network as net
from . import training as tr
from . import transport as tp
from .geometry import DefectClass, LabelGrid
from .losses import LossConfig


class PipelineError(RuntimeError):
    """Operational failure (exit code 1)."""


class ValidationFailure(ValueError):
    """User-input or guard failure (exit code 2)."""


CLASS_SLOTS = ("healthy", "honeycombing", "shear", "corrosion",
               "delamination", "healthy")
VALID_CLASS_NAMES = tuple(sorted(set(CLASS_SLOTS)))


@dataclass(frozen=True)
class CampaignConfig:
    n_per_class: int = 10
    events_per_volume: int = 500
    campaign_seed: int = 1
    classes: tuple = VALID_CLASS_NAMES
    beam_energy_gev: float = 4.0
    gun_z: float = 2500.0
    xy_half_width: float = 500.0
    physics_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValidationFailure("n_per_class must be at least 1")
        bad = set(self.classes) - set(VALID_CLASS_NAMES)
        if bad:
            raise ValidationFailure(
                f"unknown classes {sorted(bad)}; valid: {VALID_CLASS_NAMES}")

    def slot_sequence(self) -> list[str]:
        return [s for s in CLASS_SLOTS if s in self.classes]

    def beam(self) -> tp.BeamSpec:
        return tp.BeamSpec(energy_gev=self.beam_energy_gev, gun_z=self.gun_z,
                           xy_half_width=self.xy_half_width,
                           events_per_volume=self.events_per_volume)

    def physics(self) -> tp.PhysicsTable:
        if not self.physics_overrides:
            return tp.PhysicsTable()
        kwargs = dict(self.physics_overrides)
        return tp.PhysicsTable(**kwargs)


def volume_specs_for(config: CampaignConfig) -> dict[int, "DefectSpec"]:
    from .geometry import DefectSpec
    slots = config.slot_sequence()
    specs = {}
    for rep in range(config.n_per_class):
        for j, name in enumerate(slots):
            index = rep * len(slots) + j
            specs[index] = DefectSpec(defect=DefectClass(name), seed=0)
    return specs


def run_simulate(config: CampaignConfig, out_dir: str | Path,
                 n_workers: int = 1, force: bool = False) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = volume_specs_for(config)
    manifest, errors = tp.run_campaign(
        specs, config.beam(), tp.DetectorLayout(), config.physics(),
        config.campaign_seed, out_dir, n_workers=n_workers, force=force)
    write_provenance(out_dir, {"campaign_config": asdict(config)})
    if errors:
        raise PipelineError(
            f"{len(errors)} volumes failed: {dict(list(errors.items())[:3])}")
    return manifest


def stream_file_names(index: int) -> tuple[str, str]:
    return (f"vol_{index:04d}_stream1.mvft", f"vol_{index:04d}_stream2.mvft")


def run_featurize(dataset_dir: str | Path, force: bool = False,
                  quiet: bool = True) -> dict[int, str]:
    """Extract both stream tensors per volume; compute normalization
    statistics from the training split when split.json is present.

    Returns per-volume error strings for volumes that failed (flagged,
    not fatal)."""
    dataset_dir = Path(dataset_dir)
    manifest = tp.load_campaign_manifest(dataset_dir)
    errors: dict[int, str] = {}
    for key in sorted(manifest["volumes"], key=int):
        index = int(key)
        entry = manifest["volumes"][key]
        s1_name, s2_name = stream_file_names(index)
        if not force and (dataset_dir / s1_name).exists() \
                and (dataset_dir / s2_name).exists():
            continue
        try:
            views = ft.load_volume_events(dataset_dir / entry["hit_file"],
                                          dataset_dir / entry["event_file"])
            result = ft.extract_streams(views)
            ft.save_feature_tensor(dataset_dir / s1_name, result.stream1)
            ft.save_feature_tensor(dataset_dir / s2_name, result.stream2)
        except (ValueError, KeyError, OSError) as exc:
            errors[index] = f"{type(exc).__name__}: {exc}"
            if not quiet:
                print(f"volume {index} flagged: {errors[index]}")
    split_path = dataset_dir / "split.json"
    if split_path.exists():
        split = tr.SplitManifest.load(split_path)
        volumes = []
        for index in split.train:
            s1_name, s2_name = stream_file_names(index)
            volumes.append((ft.load_feature_tensor(dataset_dir / s1_name),
                            ft.load_feature_tensor(dataset_dir / s2_name)))
        stats = ft.compute_norm_stats(volumes)
        stats.save(dataset_dir / "norm_stats.json")
    elif not quiet:
        print("warning: no split.json; features written, normalization "
              "statistics deferred")
    return errors


def run_split(dataset_dir: str | Path,
              ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
              seed: int = 0) -> tr.SplitManifest:
    dataset_dir = Path(dataset_dir)
    manifest = tp.load_campaign_manifest(dataset_dir)
    classes = {int(k): v["class"] for k, v in manifest["volumes"].items()}
    split = tr.stratified_split(classes, ratios, seed)
    split.save(dataset_dir / "split.json")
    return split


def load_dataset(dataset_dir: str | Path,
                 stats: ft.NormStats | None = None,
                 indices=None) -> tr.Dataset:
    """Load (normalized) feature volumes and labels into memory."""
    dataset_dir = Path(dataset_dir)
    manifest = tp.load_campaign_manifest(dataset_dir)
    if stats is None:
        stats_path = dataset_dir / "norm_stats.json"
        if not stats_path.exists():
            raise PipelineError(f"missing {stats_path}; run featurize first")
        stats = ft.NormStats.load(stats_path)
    samples = {}
    wanted = set(int(i) for i in indices) if indices is not None else None
    for key in sorted(manifest["volumes"], key=int):
        index = int(key)
        if wanted is not None and index not in wanted:
            continue
        entry = manifest["volumes"][key]
        s1_name, s2_name = stream_file_names(index)
        s1 = ft.load_feature_tensor(dataset_dir / s1_name)
        s2 = ft.load_feature_tensor(dataset_dir / s2_name)
        s1, s2 = ft.apply_norm(s1, s2, stats)
        labels = LabelGrid.load(dataset_dir / entry["label_file"]).values
        samples[index] = tr.VolumeSample(index=index, stream1=s1, stream2=s2,
                                         labels=labels,
                                         defect_class=entry["class"])
    return tr.Dataset(samples)


def write_provenance(out_dir: str | Path, configs: dict) -> None:
    payload = {"tool_version": __version__}
    payload.update(configs)
    with open(Path(out_dir) / "provenance.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def run_train(dataset_dir: str | Path, out_dir: str | Path,
              model_config: net.ModelConfig, train_config: tr.TrainConfig,
              loss_config: LossConfig, quiet: bool = False) -> tr.TrainResult:
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = tr.SplitManifest.load(dataset_dir / "split.json")
    dataset = load_dataset(dataset_dir)
    model = net.Model(model_config, seed=train_config.seed)
    write_provenance(out_dir, {
        "model_config": json.loads(model_config.to_json()),
        "train_config": json.loads(train_config.to_json()),
        "loss_config": json.loads(loss_config.to_json()),
        "dataset_dir": str(dataset_dir),
        "param_count": model.param_count(),
    })
    result = tr.train(model, dataset, split, train_config, loss_config,
                      out_dir, quiet=quiet)
    summary = {"best_epoch": result.best_epoch,
               "best_val_defect_dice": result.best_val_defect_dice,
               "epochs_run": result.epochs_run,
               "param_count": model.param_count()}
    with open(out_dir / "train_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result


def run_evaluate(dataset_dir: str | Path, checkpoint: str | Path,
                 out_dir: str | Path, subset: str = "val",
                 n_slice_volumes: int = 2,
                 slice_z: tuple[int, ...] = (5, 10, 15),
                 truth_as_prediction: bool = False) -> ev.EvaluationReport:
    """Evaluate a frozen checkpoint on one split (or 'all' volumes).

    truth_as_prediction bypasses the model (oracle mode for pipeline tests).
    """
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if subset in ("train", "val", "test"):
        split = tr.SplitManifest.load(dataset_dir / "split.json")
        indices = getattr(split, subset)
    elif subset == "all":
        indices = None
    else:
        raise ValidationFailure(f"unknown subset {subset!r}")
    dataset = load_dataset(dataset_dir, indices=indices)
    samples = [dataset.samples[i] for i in sorted(dataset.samples)]
    if truth_as_prediction:
        report = ev.evaluate_predictions(
            [s.labels for s in samples], [s.labels for s in samples],
            classes=[s.defect_class for s in samples])
    else:
        model = net.load(checkpoint)
        report = ev.evaluate_volumes(model, samples)
    ev.write_report(report, out_dir)
    write_provenance(out_dir, {"dataset_dir": str(dataset_dir),
                               "checkpoint": str(checkpoint),
                               "subset": subset})
    for k, s in enumerate(samples[:n_slice_volumes]):
        if report.predictions:
            ev.export_slices(report.predictions[k], s.labels, slice_z,
                             out_dir / "slices", tag=f"vol{s.index:04d}")
    return report


def run_fresh_validate(train_dataset_dir: str | Path,
                       checkpoint: str | Path, out_dir: str | Path,
                       fresh_seed: int, n_per_class: int = 10,
                       events_per_volume: int | None = None,
                       n_workers: int = 1) -> ev.EvaluationReport:
    """Simulate an independent campaign, featurize it with the SAVED
    normalization statistics, and evaluate the frozen checkpoint on it."""
    train_dataset_dir = Path(train_dataset_dir)
    out_dir = Path(out_dir)
    train_manifest = tp.load_campaign_manifest(train_dataset_dir)
    if int(fresh_seed) == int(train_manifest["campaign_seed"]):
        raise ValidationFailure(
            "fresh-validation seed equals the training campaign seed; "
            "choose a disjoint seed")
    stats_path = train_dataset_dir / "norm_stats.json"
    if not stats_path.exists():
        raise ValidationFailure(f"missing {stats_path}")
    events = events_per_volume
    if events is None:
        events = int(train_manifest["events_per_volume"])
    fresh_dir = out_dir / "fresh_dataset"
    config = CampaignConfig(n_per_class=n_per_class,
                            events_per_volume=events,
                            campaign_seed=int(fresh_seed))
    run_simulate(config, fresh_dir, n_workers=n_workers)
    run_featurize(fresh_dir)
    stats = ft.NormStats.load(stats_path)
    dataset = load_dataset(fresh_dir, stats=stats)
    samples = [dataset.samples[i] for i in sorted(dataset.samples)]
    model = net.load(checkpoint)
    report = ev.evaluate_volumes(model, samples)
    ev.write_report(report, out_dir)
    for k, s in enumerate(samples[:2]):
        ev.export_slices(report.predictions[k], s.labels, (5, 10, 15),
                         out_dir / "slices", tag=f"vol{s.index:04d}")
    write_provenance(out_dir, {
        "train_dataset_dir": str(train_dataset_dir),
        "checkpoint": str(checkpoint), "fresh_seed": int(fresh_seed),
        "n_per_class": n_per_class, "events_per_volume": events})
    return report


ABLATION_PRESETS = ("full", "no_attn_gate", "no_deep_sup", "scatter_only",
                    "shower_only")


def run_ablate(dataset_dir: str | Path, out_dir: str | Path,
               presets=ABLATION_PRESETS, base_width: int | None = None,
               train_config: tr.TrainConfig = tr.TrainConfig(),
               loss_config: LossConfig = LossConfig(),
               quiet: bool = False) -> list[dict]:
    """Train each preset under identical data/seeds; emit a comparison table
    and charts.  A failing variant aborts only its own row."""
    from . import reporting
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    curve_paths = {}
    for name in presets:
        run_dir = out_dir / name
        try:
            model_config = net.preset(name, base_width=base_width)
            result = run_train(dataset_dir, run_dir, model_config,
                               train_config, loss_config, quiet=quiet)
            report = run_evaluate(dataset_dir, result.checkpoint_path,
                                  run_dir / "eval", subset="val")
            model = net.load(result.checkpoint_path)
            row = {"variant": name, "params": model.param_count(),
                   "overall_dice": report.seg.overall_dice_micro,
                   "defect_mean_dice": report.seg.defect_mean_dice,
                   "seed": train_config.seed}
            for c in ev.DEFECT_CLASSES:
                row[f"dice_{ev.CLASS_NAMES[c]}"] = float(report.seg.dice[c])
            rows.append(row)
            curve_paths[name] = result.metrics_path
        except (tr.TrainingError, PipelineError, OSError) as exc:
            rows.append({"variant": name, "error": str(exc)})
    header = ["variant", "params", "overall_dice", "defect_mean_dice",
              "dice_honeycombing", "dice_shear", "dice_corrosion",
              "dice_delamination", "seed"]
    with open(out_dir / "ablation.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            if "error" in row:
                fh.write(f"{row['variant']},error: {row['error']}\n")
            else:
                fh.write(",".join(str(row.get(k, "")) for k in header) + "\n")
    ok_rows = [r for r in rows if "error" not in r]
    if ok_rows:
        reporting.ablation_bars(ok_rows, out_dir / "ablation_bars.svg")
    if curve_paths:
        reporting.training_curves(curve_paths, out_dir / "training_curves.svg")
    write_provenance(out_dir, {
        "presets": list(presets),
        "train_config": json.loads(train_config.to_json()),
        "base_width": base_width})
    return rows


def run_report(run_dirs: list[str | Path], out_dir: str | Path) -> dict:
    """Merge evaluation reports and training logs into comparison charts.

    Missing inputs are listed in the output; the report is still produced.
    """
    from . import reporting
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    found = {}
    missing = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        label = run_dir.name
        entry = {}
        metrics = run_dir / "metrics.json"
        if not metrics.exists():
            metrics = run_dir / "eval" / "metrics.json"
        if metrics.exists():
            entry["metrics"] = json.loads(metrics.read_text())
        curve = run_dir / "metrics.csv"
        if curve.exists():
            entry["curve"] = str(curve)
        if entry:
            found[label] = entry
        else:
            missing.append(str(run_dir))
    if not found:
        raise ValidationFailure("no usable run directories for the report")
    summary = {"runs": sorted(found), "missing": missing}
    comparison = {}
    for label, entry in found.items():
        if "metrics" in entry:
            voxel = entry["metrics"]["voxel"]
            comparison[label] = {
                "defect_mean_dice": voxel["defect_mean_dice"],
                "overall_accuracy": voxel["overall_accuracy"],
                "per_class": {k: v["dice"]
                              for k, v in voxel["per_class"].items()},
            }
    summary["comparison"] = comparison
    with open(out_dir / "report.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if comparison:
        reporting.run_comparison_bars(comparison, out_dir / "comparison.svg")
    curves = {label: entry["curve"] for label, entry in found.items()
              if "curve" in entry}
    if curves:
        reporting.training_curves(curves, out_dir / "training_curves.svg")
    rocs = {}
    for label, entry in found.items():
        metrics = entry.get("metrics", {})
        det = metrics.get("detection", {})
        if det:
            rocs[label] = det
    if rocs:
        reporting.roc_overlay(found, out_dir / "roc_overlay.svg")
    return summary
