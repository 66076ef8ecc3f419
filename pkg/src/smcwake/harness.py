"""Experiment orchestration: TOML configs, dataset generation, training
dispatch, metrics/plot-data emission, and run comparison.

All stochastic behavior flows from the config seed through named RNG streams,
so re-runs of the same config + seed are bit-identical (the wall-clock column
excepted; pass ``timing=False`` for byte-identical CSVs).
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):  # pragma: no cover
    import tomllib
else:
    import tomli as tomllib

from . import figures
from .encoder import FullCovGaussianEncoder, MixtureDiagGaussianEncoder
from .metrics import (
    amortized_kl_report,
    mc_forward_kl_report,
    reference_posterior_samples,
)
from .models import ConjugateGaussian1D, GaussianLinearModel, TwoMoonsModel, make_dataset
from .numkit import RngStream
from .smc import MUTATION_PRESETS, MutationConfig, ParticleCollapseError, TemperSchedule
from .trainers import (
    TrainerConfig,
    msc_train,
    smc_pimh_wake_train,
    smc_wake_train,
    wake_phase_train,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "compare_runs",
    "METRICS_HEADER",
]

METRICS_HEADER = "step,method,fwd_kl,rev_kl,sym_kl,mean_log_C,mean_ess,wall_ms"

METHODS = ("smc-wake-a", "smc-wake-b", "smc-wake-c", "smc-pimh-wake",
           "rws", "defensive-rws", "msc")

MODEL_FAMILIES = ("conjugate-gaussian-1d", "gaussian-linear", "two-moons")


class ConfigError(ValueError):
    """Configuration failed to parse or validate."""


def derive_seed(master: int, tag: str) -> int:
    return RngStream(master).child(tag).stream & 0x7FFFFFFF


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run: model spec, dataset size,
    method, trainer hyperparameters, and output policy."""

    method: str = "smc-wake-a"
    seed: int = 0
    model: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    smc: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def model_spec(self) -> dict:
        """Canonical model description used for run-compatibility checks."""
        spec = {"family": self.model.get("family", "conjugate-gaussian-1d")}
        if spec["family"] == "gaussian-linear":
            spec.update({
                "latent_dim": int(self.model.get("latent_dim", 8)),
                "obs_dim": int(self.model.get("obs_dim", 16)),
                "prior_std": float(self.model.get("prior_std", 1.0)),
                "noise_std": float(self.model.get("noise_std", 1.0)),
                "design_seed": int(self.model.get("seed", derive_seed(self.seed, "design"))),
            })
        spec["n"] = int(self.data.get("n", 10))
        spec["data_seed"] = int(self.data.get("seed", derive_seed(self.seed, "data")))
        return spec


_ALLOWED_SECTIONS = {"method", "seed", "model", "data", "encoder", "train", "smc", "output"}


def load_config(source) -> ExperimentConfig:
    """Parse and validate a config from a TOML path or a plain dict."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    elif isinstance(source, dict):
        raw = dict(source)
    else:
        raise ConfigError(f"config must be a path or dict, not {type(source).__name__}")

    unknown = set(raw) - _ALLOWED_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = ExperimentConfig(
        method=raw.get("method", "smc-wake-a"),
        seed=int(raw.get("seed", 0)),
        model=dict(raw.get("model", {})),
        data=dict(raw.get("data", {})),
        encoder=dict(raw.get("encoder", {})),
        train=dict(raw.get("train", {})),
        smc=dict(raw.get("smc", {})),
        output=dict(raw.get("output", {})),
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.method not in METHODS:
        raise ConfigError(f"method: {cfg.method!r} is not one of {METHODS}")
    family = cfg.model.get("family", "conjugate-gaussian-1d")
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"model.family: {family!r} is not one of {MODEL_FAMILIES}")
    if int(cfg.data.get("n", 10)) < 1:
        raise ConfigError("data.n: need at least one observation")
    if int(cfg.train.get("steps", 0)) < 0:
        raise ConfigError("train.steps: must be >= 0")
    sched = cfg.smc.get("schedule", "adaptive")
    if not (sched == "adaptive" or isinstance(sched, list)):
        raise ConfigError("smc.schedule: 'adaptive' or a list of temperatures")
    preset = cfg.smc.get("mutation_preset", "")
    if preset and preset not in MUTATION_PRESETS:
        raise ConfigError(
            f"smc.mutation_preset: {preset!r} is not one of {sorted(MUTATION_PRESETS)}")
    enc_family = cfg.encoder.get("family", "auto")
    if enc_family not in ("auto", "full-cov", "mixture-diag"):
        raise ConfigError(f"encoder.family: {enc_family!r} unknown")


def build_model(cfg: ExperimentConfig):
    family = cfg.model.get("family", "conjugate-gaussian-1d")
    if family == "conjugate-gaussian-1d":
        return ConjugateGaussian1D(
            prior_std=float(cfg.model.get("prior_std", 10.0)),
            noise_std=float(cfg.model.get("noise_std", 1.0)),
        )
    if family == "gaussian-linear":
        csv = cfg.model.get("design_csv", "")
        if csv:
            return GaussianLinearModel.from_csv(
                csv,
                prior_std=float(cfg.model.get("prior_std", 1.0)),
                noise_std=float(cfg.model.get("noise_std", 1.0)),
            )
        return GaussianLinearModel.from_seed(
            latent_dim=int(cfg.model.get("latent_dim", 8)),
            obs_dim=int(cfg.model.get("obs_dim", 16)),
            seed=int(cfg.model.get("seed", derive_seed(cfg.seed, "design"))),
            prior_std=float(cfg.model.get("prior_std", 1.0)),
            noise_std=float(cfg.model.get("noise_std", 1.0)),
            singular_values=cfg.model.get("singular_values"),
        )
    return TwoMoonsModel()


def build_encoder(cfg: ExperimentConfig, model):
    family = cfg.encoder.get("family", "auto")
    if family == "auto":
        family = "mixture-diag" if isinstance(model, TwoMoonsModel) else "full-cov"
    hidden = tuple(cfg.encoder.get("hidden", [64, 64]))
    seed = int(cfg.encoder.get("seed", derive_seed(cfg.seed, "encoder")))
    if family == "full-cov":
        return FullCovGaussianEncoder(
            model.obs_dim, model.latent_dim, hidden=hidden,
            jitter=float(cfg.encoder.get("jitter", 1e-4)), rng=seed)
    return MixtureDiagGaussianEncoder(
        model.obs_dim, model.latent_dim,
        n_components=int(cfg.encoder.get("components", 8)),
        hidden=hidden, rng=seed)


def build_trainer_config(cfg: ExperimentConfig) -> TrainerConfig:
    smc = cfg.smc
    if smc.get("mutation_preset"):
        mutation = MUTATION_PRESETS[smc["mutation_preset"]]
    else:
        mutation = MutationConfig(
            steps=int(smc.get("mutation_steps", 5)),
            step_std=float(smc.get("mutation_std", np.sqrt(0.1))),
            target=smc.get("mutation_target", "current"),
        )
    sched = smc.get("schedule", "adaptive")
    if sched == "adaptive":
        schedule = TemperSchedule.adaptive(smc.get("ess_min"))
    else:
        schedule = TemperSchedule.fixed(sched)
    train = cfg.train
    estimator = {"smc-wake-a": "a", "smc-wake-b": "b", "smc-wake-c": "c"}.get(
        cfg.method, train.get("estimator", "a"))
    return TrainerConfig(
        method=cfg.method,
        steps=int(train.get("steps", 1000)),
        batch_size=int(train.get("batch_size", 8)),
        lr=float(train.get("lr", 1e-3)),
        optimizer=train.get("optimizer", "adam"),
        particles=int(train.get("particles", 100)),
        schedule=schedule,
        mutation=mutation,
        ess_resample_frac=float(smc.get("resample_ess_frac", 0.5)),
        resample_scheme=smc.get("resample_scheme", "systematic"),
        refresh_per_step=int(train.get("refresh_per_step", 1)),
        pre_runs=int(train.get("pre_runs", 1)),
        estimator=estimator,
        m_star=train.get("m_star", 16),
        window=train.get("window"),
        seed=int(train.get("seed", derive_seed(cfg.seed, "train"))),
        metrics_interval=int(train.get("metrics_interval", 100)),
        defensive=cfg.method == "defensive-rws",
    )


def _fmt(value: float) -> str:
    return f"{float(value):.10g}"


def write_metrics_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(",".join([
            str(int(r["step"])), r["method"], _fmt(r["fwd_kl"]), _fmt(r["rev_kl"]),
            _fmt(r["sym_kl"]), _fmt(r["mean_log_C"]), _fmt(r["mean_ess"]),
            _fmt(r["wall_ms"]),
        ]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metrics_csv(path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: not a metrics file (bad header)")
    rows = []
    for line in lines[1:]:
        step, method, *vals = line.split(",")
        keys = ("fwd_kl", "rev_kl", "sym_kl", "mean_log_C", "mean_ess", "wall_ms")
        rows.append({"step": int(step), "method": method,
                     **{k: float(v) for k, v in zip(keys, vals)}})
    return rows


def run_experiment(config_source, seed: int | None = None, method: str | None = None,
                   out: str | Path | None = None, steps: int | None = None,
                   particles: int | None = None, figures_enabled: bool | None = None,
                   timing: bool = True) -> dict:
    """Run one configured experiment and write its artifacts.

    Writes metrics.csv, summary.json, an encoder checkpoint, plot-data CSVs,
    optional JSONL sampler diagnostics, and (unless disabled) PNG figures
    rendered from the same data. Returns the summary dict.
    """
    cfg = load_config(config_source) if not isinstance(config_source, ExperimentConfig) \
        else config_source
    if seed is not None:
        cfg.seed = int(seed)
        cfg.model.pop("seed", None)
        cfg.data.pop("seed", None)
        cfg.encoder.pop("seed", None)
        cfg.train.pop("seed", None)
    if method is not None:
        cfg.method = method
    if steps is not None:
        cfg.train["steps"] = int(steps)
    if particles is not None:
        cfg.train["particles"] = int(particles)
    validate_config(cfg)

    import os

    out_dir = Path(out) if out is not None else Path(
        cfg.output.get("dir", os.environ.get("SMCWAKE_OUT", "runs")))
    out_dir.mkdir(parents=True, exist_ok=True)
    if figures_enabled is None:
        figures_enabled = bool(cfg.output.get("figures", True))

    model = build_model(cfg)
    data_seed = int(cfg.data.get("seed", derive_seed(cfg.seed, "data")))
    latents, observations = make_dataset(model, int(cfg.data.get("n", 10)),
                                         RngStream(data_seed))
    encoder = build_encoder(cfg, model)
    tcfg = build_trainer_config(cfg)

    analytic = hasattr(model, "analytic_posterior") and hasattr(encoder, "conditional")
    eval_rng = RngStream(derive_seed(cfg.seed, "eval"))
    reference = None
    if not analytic:
        reference = reference_posterior_samples(
            model, observations, eval_rng.generator(),
            particles=int(cfg.output.get("eval_particles", 512)),
            mutation=tcfg.mutation)

    rows: list[dict] = []
    t_start = time.perf_counter()

    def metrics_hook(step, enc, extra):
        if analytic:
            report = amortized_kl_report(enc, model, observations, step=step)
        else:
            report = mc_forward_kl_report(enc, model, observations, eval_rng.generator(),
                                          step=step, reference=reference)
        rows.append({
            "step": step,
            "method": cfg.method,
            "fwd_kl": report.avg_forward,
            "rev_kl": report.avg_reverse,
            "sym_kl": report.avg_symmetric,
            "mean_log_C": extra.get("mean_log_evidence", np.nan),
            "mean_ess": extra.get("mean_final_ess", np.nan),
            "wall_ms": (time.perf_counter() - t_start) * 1e3 if timing else 0.0,
        })

    diagnostics_path = None
    run_log = None
    if cfg.output.get("diagnostics", False):
        diagnostics_path = out_dir / "smc_runs.jsonl"
        handle = open(diagnostics_path, "w")

        def run_log(record):  # noqa: F811 - deliberate rebind
            handle.write(json.dumps(record) + "\n")

    error = None
    result = None
    try:
        if cfg.method in ("smc-wake-a", "smc-wake-b", "smc-wake-c"):
            result = smc_wake_train(tcfg, model, observations, encoder,
                                    metrics_hook=metrics_hook, run_log=run_log)
        elif cfg.method == "smc-pimh-wake":
            result = smc_pimh_wake_train(tcfg, model, observations, encoder,
                                         metrics_hook=metrics_hook, run_log=run_log)
        elif cfg.method in ("rws", "defensive-rws"):
            result = wake_phase_train(tcfg, model, observations, encoder,
                                      metrics_hook=metrics_hook)
        else:
            result = msc_train(tcfg, model, observations, encoder,
                               metrics_hook=metrics_hook)
    except ParticleCollapseError as exc:
        error = str(exc)
    finally:
        if diagnostics_path is not None:
            handle.close()

    metrics_path = write_metrics_csv(rows, out_dir / "metrics.csv")
    checkpoint = out_dir / "encoder.bin"
    encoder.save(checkpoint)

    plot_files = [str(metrics_path)]
    if isinstance(model, TwoMoonsModel) and error is None:
        plot_files += _emit_two_moons_scatter(
            encoder, observations, reference, out_dir, eval_rng,
            figures_enabled=figures_enabled)
    if figures_enabled and rows:
        fig_path = figures.render_kl_curves(rows, out_dir / "kl_curves.png")
        if fig_path is not None:
            plot_files.append(str(fig_path))

    summary = {
        "method": cfg.method,
        "seed": cfg.seed,
        "model_spec": cfg.model_spec(),
        "steps": tcfg.steps,
        "particles": tcfg.particles,
        "final_metrics": rows[-1] if rows else None,
        "error": error,
        "skipped_updates": getattr(result, "skipped_updates", 0) if result else None,
        "artifacts": {
            "metrics": str(metrics_path),
            "checkpoint": str(checkpoint),
            "diagnostics": str(diagnostics_path) if diagnostics_path else None,
            "plots": plot_files,
        },
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _emit_two_moons_scatter(encoder, observations, reference, out_dir,
                            eval_rng: RngStream, figures_enabled=True,
                            max_points: int = 6, n_samples: int = 500):
    files = []
    for j in range(min(len(observations), max_points)):
        x = observations[j]
        qs = encoder.sample(x, n_samples, eval_rng.child("scatter", j))
        ref = reference[j][0] if reference is not None else None
        csv_path = Path(out_dir) / f"posterior_scatter_{j}.csv"
        lines = ["source,z1,z2"]
        for row in qs:
            lines.append(f"encoder,{row[0]:.8g},{row[1]:.8g}")
        if ref is not None:
            for row in ref:
                lines.append(f"reference,{row[0]:.8g},{row[1]:.8g}")
        csv_path.write_text("\n".join(lines) + "\n")
        files.append(str(csv_path))
        if figures_enabled:
            groups = {"encoder": qs}
            if ref is not None:
                groups["reference"] = ref
            png = figures.render_scatter(groups, Path(out_dir) / f"posterior_scatter_{j}.png",
                                         title=f"datapoint {j}")
            files.append(str(png))
    return files


def compare_runs(metrics_paths, out_path=None, figures_enabled: bool = False):
    """Align runs by final and best forward KL; refuses mismatched models.

    Each metrics.csv must sit next to the summary.json its run produced.
    Returns (text table, comparison dict).
    """
    if not metrics_paths:
        raise ValueError("no metrics files given")
    runs = []
    spec0 = None
    for path in metrics_paths:
        path = Path(path)
        rows = read_metrics_csv(path)
        summary_path = path.parent / "summary.json"
        if not summary_path.exists():
            raise ValueError(f"{path}: missing summary.json sidecar (model spec unknown)")
        summary = json.loads(summary_path.read_text())
        spec = summary.get("model_spec")
        if spec0 is None:
            spec0 = spec
        elif spec != spec0:
            raise ValueError(
                f"{path}: model spec {spec} does not match first run's {spec0}; refusing")
        label = summary.get("method", rows[-1]["method"] if rows else path.stem)
        runs.append({"label": label, "path": str(path), "rows": rows})

    entries = []
    for run in runs:
        rows = run["rows"]
        final = rows[-1]
        fwd_vals = [r["fwd_kl"] for r in rows if np.isfinite(r["fwd_kl"])]
        entries.append({
            "method": run["label"],
            "path": run["path"],
            "final_step": final["step"],
            "final_fwd_kl": final["fwd_kl"],
            "final_rev_kl": final["rev_kl"],
            "final_sym_kl": final["sym_kl"],
            "best_fwd_kl": min(fwd_vals) if fwd_vals else float("nan"),
        })
    finite = [e["final_fwd_kl"] for e in entries if np.isfinite(e["final_fwd_kl"])]
    best = min(finite) if finite else float("nan")
    ties = [e for e in entries if e["final_fwd_kl"] == best]
    for e in entries:
        e["is_min_fwd"] = np.isfinite(e["final_fwd_kl"]) and e["final_fwd_kl"] == best
    comparison = {"model_spec": spec0, "entries": entries,
                  "tie": len(ties) > 1}

    widths = max(len(e["method"]) for e in entries)
    lines = [f"{'method':<{widths}}  {'step':>7}  {'fwd_kl':>12}  {'rev_kl':>12}  "
             f"{'sym_kl':>12}  {'best_fwd':>12}  min"]
    for e in entries:
        flag = "*" if e["is_min_fwd"] else ""
        if e["is_min_fwd"] and comparison["tie"]:
            flag = "=tie"
        lines.append(
            f"{e['method']:<{widths}}  {e['final_step']:>7d}  {e['final_fwd_kl']:>12.5g}  "
            f"{e['final_rev_kl']:>12.5g}  {e['final_sym_kl']:>12.5g}  "
            f"{e['best_fwd_kl']:>12.5g}  {flag}")
    text = "\n".join(lines)

    if out_path is not None:
        out_path = Path(out_path)
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "comparison.txt").write_text(text + "\n")
        (out_path / "comparison.json").write_text(json.dumps(comparison, indent=2))
        if figures_enabled:
            figures.render_comparison_curves(
                {run["label"]: run["rows"] for run in runs},
                out_path / "comparison.png")
    return text, comparison
