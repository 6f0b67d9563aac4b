"""Experiment harness: config files, multi-seed runs, CSV curves, SVG plots.

A plain-text config (``key = value`` lines under bracketed section headers)
selects methods, environment, and seeds and may override any training knob.
Each (method, seed) pair runs independently (optionally in parallel worker
processes); learning-curve rows are merged in a fixed order so identical
configs always produce byte-identical CSV files (wall-time column aside).

The sample-efficiency metric is steps-to-threshold: the first environment
step count at which the periodic evaluation mean crosses an env-specific
return threshold.
"""

from __future__ import annotations

import json
import multiprocessing
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import dyna
from .errors import NoDataError

METHOD_BASELINE = "sac_baseline"
METHOD_INCDYN = "incdyn"
_METHODS = (METHOD_BASELINE, METHOD_INCDYN)

CSV_HEADER = "method,env,seed,env_steps,episodic_return,model_holdout_error,wall_time_s"

DEFAULT_THRESHOLDS = {"pendulum": -200.0, "cartpole": 450.0, "linear": -5.0}

_PLOT_COLORS = {METHOD_BASELINE: "#d62728", METHOD_INCDYN: "#1f77b4"}


class ConfigError(Exception):
    """Base class for configuration problems; `code` names the failure kind."""

    code = "config"


class ConfigFileError(ConfigError):
    code = "config-missing"


class ConfigParseError(ConfigError):
    code = "config-parse"


class ConfigKeyError(ConfigError):
    code = "config-key"


class ConfigValueError(ConfigError):
    code = "config-value"


@dataclass(frozen=True)
class FinetuneConfig:
    model_path: str | None = None
    reference_path: str | None = None
    env: str = "linear"
    steps: int = 50
    q_scale: float = 1.0
    r_scale: float = 0.1
    operating_state: tuple[float, ...] | None = None
    operating_prev_action: tuple[float, ...] | None = None
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...] = (METHOD_INCDYN,)
    env: str = "pendulum"
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "results"
    threshold: float | None = None
    workers: int = 1
    stop_at_threshold: bool = False
    baseline_updates_per_step: int = 1
    save_checkpoints: bool = True
    train: dyna.TrainConfig = field(default_factory=dyna.TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def env_threshold(self) -> float:
        if self.threshold is not None:
            return self.threshold
        return DEFAULT_THRESHOLDS[self.env]


@dataclass(frozen=True)
class CurveRow:
    method: str
    env: str
    seed: int
    env_steps: int
    episodic_return: float
    model_holdout_error: float
    wall_time_s: float


def _parse_scalar(raw: str, kind: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigValueError(f"key {key!r}: cannot parse {raw!r} as {kind}") from None


def _parse_tuple(raw: str, kind: str, key: str) -> tuple:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigValueError(f"key {key!r}: empty list")
    return tuple(_parse_scalar(p, kind, key) for p in parts)


def _read_sections(path: str) -> dict[str, dict[str, str]]:
    if not os.path.isfile(path):
        raise ConfigFileError(f"config file not found: {path}")
    sections: dict[str, dict[str, str]] = {}
    current = "experiment"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if stripped.startswith("[") and stripped.endswith("]"):
                current = stripped[1:-1].strip()
                sections.setdefault(current, {})
                continue
            if "=" not in stripped:
                raise ConfigParseError(f"line {lineno}: expected 'key = value', got {stripped!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if not key:
                raise ConfigParseError(f"line {lineno}: empty key")
            sections.setdefault(current, {})[key] = value.split("#", 1)[0].strip()
    return sections


def _range_check(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigValueError(message)


def parse_config(path: str) -> ExperimentConfig:
    """Parse an experiment config file; an empty file yields full defaults.

    Unknown sections or keys are errors, never silently ignored.
    """
    sections = _read_sections(path)
    known_sections = {"experiment", "train", "sac", "model", "finetune"}
    for name in sections:
        if name not in known_sections:
            raise ConfigKeyError(f"unknown section [{name}]")

    cfg = ExperimentConfig()
    train = cfg.train
    hyper = train.sac
    finetune = cfg.finetune

    for key, raw in sections.get("experiment", {}).items():
        if key == "method":
            methods = _parse_tuple(raw, "str", key)
            for m in methods:
                _range_check(m in _METHODS, f"unknown method {m!r}")
            cfg = replace(cfg, methods=methods)
        elif key == "env":
            _range_check(raw in DEFAULT_THRESHOLDS, f"unknown env {raw!r}")
            cfg = replace(cfg, env=raw)
        elif key == "seeds":
            cfg = replace(cfg, seeds=_parse_tuple(raw, "int", key))
        elif key == "out":
            cfg = replace(cfg, out_dir=raw)
        elif key == "threshold":
            cfg = replace(cfg, threshold=_parse_scalar(raw, "float", key))
        elif key == "workers":
            v = _parse_scalar(raw, "int", key)
            _range_check(v >= 1, "workers must be >= 1")
            cfg = replace(cfg, workers=v)
        elif key == "stop_at_threshold":
            cfg = replace(cfg, stop_at_threshold=_parse_scalar(raw, "bool", key))
        elif key == "baseline_updates_per_step":
            v = _parse_scalar(raw, "int", key)
            _range_check(v >= 0, "baseline_updates_per_step must be >= 0")
            cfg = replace(cfg, baseline_updates_per_step=v)
        elif key == "save_checkpoints":
            cfg = replace(cfg, save_checkpoints=_parse_scalar(raw, "bool", key))
        else:
            raise ConfigKeyError(f"unknown key {key!r} in [experiment]")

    int_train_keys = {"epochs", "steps_per_epoch", "rollouts_per_step", "updates_per_step",
                      "model_train_steps", "model_batch_size", "warmup_steps",
                      "env_buffer_capacity", "model_buffer_capacity",
                      "eval_episodes", "eval_interval_steps"}
    for key, raw in sections.get("train", {}).items():
        if key in int_train_keys:
            v = _parse_scalar(raw, "int", key)
            _range_check(v >= 0, f"{key} must be >= 0")
            train = replace(train, **{key: v})
        elif key == "real_data_fraction":
            v = _parse_scalar(raw, "float", key)
            _range_check(0.0 <= v <= 1.0, "real_data_fraction must be in [0, 1]")
            train = replace(train, real_data_fraction=v)
        elif key == "stop_at_return":
            train = replace(train, stop_at_return=None if raw.lower() == "none"
                            else _parse_scalar(raw, "float", key))
        else:
            raise ConfigKeyError(f"unknown key {key!r} in [train]")

    for key, raw in sections.get("sac", {}).items():
        if key == "gamma":
            v = _parse_scalar(raw, "float", key)
            _range_check(0.0 < v < 1.0, "gamma must be in (0, 1)")
            hyper = replace(hyper, gamma=v)
        elif key == "tau":
            v = _parse_scalar(raw, "float", key)
            _range_check(0.0 < v <= 1.0, "tau must be in (0, 1]")
            hyper = replace(hyper, tau=v)
        elif key == "alpha":
            v = _parse_scalar(raw, "float", key)
            _range_check(v > 0.0, "alpha must be > 0")
            hyper = replace(hyper, alpha=v)
        elif key in ("lr_actor", "lr_critic"):
            v = _parse_scalar(raw, "float", key)
            _range_check(v > 0.0, f"{key} must be > 0")
            hyper = replace(hyper, **{key: v})
        elif key == "batch_size":
            v = _parse_scalar(raw, "int", key)
            _range_check(v >= 1, "batch_size must be >= 1")
            hyper = replace(hyper, batch_size=v)
        elif key == "actor_hidden":
            train = replace(train, policy_hidden=_parse_tuple(raw, "int", key))
        elif key == "critic_hidden":
            train = replace(train, critic_hidden=_parse_tuple(raw, "int", key))
        else:
            raise ConfigKeyError(f"unknown key {key!r} in [sac]")

    for key, raw in sections.get("model", {}).items():
        if key == "hidden":
            train = replace(train, model_hidden=_parse_tuple(raw, "int", key))
        elif key == "mode":
            _range_check(raw in ("full", "diagonal"), f"unknown model mode {raw!r}")
            train = replace(train, model_mode=raw)
        elif key == "lr":
            v = _parse_scalar(raw, "float", key)
            _range_check(v > 0.0, "model lr must be > 0")
            train = replace(train, model_lr=v)
        else:
            raise ConfigKeyError(f"unknown key {key!r} in [model]")

    for key, raw in sections.get("finetune", {}).items():
        if key == "model":
            finetune = replace(finetune, model_path=raw)
        elif key == "reference":
            finetune = replace(finetune, reference_path=raw)
        elif key == "env":
            _range_check(raw in DEFAULT_THRESHOLDS, f"unknown env {raw!r}")
            finetune = replace(finetune, env=raw)
        elif key == "steps":
            v = _parse_scalar(raw, "int", key)
            _range_check(v >= 1, "steps must be >= 1")
            finetune = replace(finetune, steps=v)
        elif key in ("q_scale", "r_scale"):
            v = _parse_scalar(raw, "float", key)
            _range_check(v >= 0.0 if key == "q_scale" else v > 0.0,
                         f"{key} out of range")
            finetune = replace(finetune, **{key: v})
        elif key == "operating_state":
            finetune = replace(finetune, operating_state=_parse_tuple(raw, "float", key))
        elif key == "operating_prev_action":
            finetune = replace(finetune,
                               operating_prev_action=_parse_tuple(raw, "float", key))
        elif key == "seed":
            finetune = replace(finetune, seed=_parse_scalar(raw, "int", key))
        else:
            raise ConfigKeyError(f"unknown key {key!r} in [finetune]")

    return replace(cfg, train=replace(train, sac=hyper), finetune=finetune)


def method_train_config(cfg: ExperimentConfig, method: str, seed: int) -> dyna.TrainConfig:
    """The per-run training config: the baseline is the degenerate reduction
    (no rollouts, no model training, pure real-data mix, its own update rate)."""
    train = replace(cfg.train, env=cfg.env, seed=seed,
                    stop_at_return=(cfg.env_threshold() if cfg.stop_at_threshold
                                    else cfg.train.stop_at_return))
    if method == METHOD_BASELINE:
        train = replace(train, rollouts_per_step=0, real_data_fraction=1.0,
                        model_train_steps=0,
                        updates_per_step=cfg.baseline_updates_per_step)
    return train


def steps_to_threshold(evals: list[dyna.EvalPoint], threshold: float) -> int | None:
    """First env step count at which the evaluation mean crosses the threshold."""
    for point in evals:
        if point.mean_return >= threshold:
            return point.env_steps
    return None


def _run_job(args) -> dict:
    cfg, method, seed = args
    train = method_train_config(cfg, method, seed)
    ckpt = None
    if cfg.save_checkpoints:
        ckpt = os.path.join(cfg.out_dir, "checkpoints", f"{method}_seed{seed}")
    result = dyna.run_training(train, checkpoint_dir=ckpt)
    rows = [CurveRow(method, cfg.env, seed, p.env_steps, p.episodic_return,
                     p.model_holdout_error, p.wall_time_s) for p in result.curve]
    return {
        "method": method,
        "seed": seed,
        "rows": rows,
        "evals": [(e.env_steps, e.mean_return) for e in result.evals],
        "status": result.status,
        "env_steps": result.counters.env_steps,
        "steps_to_threshold": steps_to_threshold(result.evals, cfg.env_threshold()),
    }


def _quantile(sorted_vals: list[float], q: float) -> float | None:
    """Linear-interpolation quantile treating non-crossing runs as +inf;
    returns None when the quantile itself is infinite."""
    n = len(sorted_vals)
    pos = q * (n - 1)
    lo, hi = int(np.floor(pos)), int(np.ceil(pos))
    frac = pos - lo
    lo_v, hi_v = sorted_vals[lo], sorted_vals[hi]
    if frac == 0.0:
        return lo_v if np.isfinite(lo_v) else None
    if not np.isfinite(hi_v):
        return None
    return lo_v + frac * (hi_v - lo_v)


def _aggregate(values: list[int | None]) -> dict:
    filled = sorted(np.inf if v is None else float(v) for v in values)
    crossed = int(sum(1 for v in filled if np.isfinite(v)))
    return {
        "crossed": crossed,
        "total": len(values),
        "median_steps_to_threshold": _quantile(filled, 0.5),
        "iqr": [_quantile(filled, 0.25), _quantile(filled, 0.75)],
    }


def run_experiment(cfg: ExperimentConfig) -> tuple[list[CurveRow], dict]:
    """Run every (method, seed) pair, write curve.csv and summary.json into
    the output directory, and return the rows plus summary statistics.

    Aborted (diverged) runs keep their partial rows and are marked in the
    summary's per-run status; they are never dropped.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    jobs = [(cfg, method, seed) for method in cfg.methods for seed in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        start = "fork" if "fork" in multiprocessing.get_all_start_methods() else "spawn"
        with multiprocessing.get_context(start).Pool(min(cfg.workers, len(jobs))) as pool:
            results = pool.map(_run_job, jobs)
    else:
        results = [_run_job(job) for job in jobs]

    rows: list[CurveRow] = []
    runs = []
    for res in results:  # pool.map preserves job order: (method, seed), as configured
        rows.extend(res["rows"])
        runs.append({k: res[k] for k in ("method", "seed", "status", "env_steps",
                                         "steps_to_threshold", "evals")})

    summary = {
        "env": cfg.env,
        "threshold": cfg.env_threshold(),
        "methods": list(cfg.methods),
        "seeds": list(cfg.seeds),
        "runs": runs,
        "aggregate": {m: _aggregate([r["steps_to_threshold"] for r in runs
                                     if r["method"] == m]) for m in cfg.methods},
    }
    write_curve_csv(rows, os.path.join(cfg.out_dir, "curve.csv"))
    with open(os.path.join(cfg.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return rows, summary


def write_curve_csv(rows: list[CurveRow], path: str) -> None:
    """UTF-8, LF line endings, exact header; floats use shortest-roundtrip repr."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            # cast defensively: repr of a numpy scalar would not round-trip
            fh.write(f"{r.method},{r.env},{r.seed},{int(r.env_steps)},"
                     f"{float(r.episodic_return)!r},{float(r.model_holdout_error)!r},"
                     f"{float(r.wall_time_s)!r}\n")


def read_curve_csv(path: str) -> list[CurveRow]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise ConfigParseError(f"unexpected CSV header: {header!r}")
        rows = []
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            if len(parts) != 7:
                raise ConfigParseError(f"bad CSV row: {line!r}")
            rows.append(CurveRow(parts[0], parts[1], int(parts[2]), int(parts[3]),
                                 float(parts[4]), float(parts[5]), float(parts[6])))
    return rows


def _pad_range(lo: float, hi: float) -> tuple[float, float]:
    if hi > lo:
        pad = 0.05 * (hi - lo)
    else:
        pad = max(1.0, 0.05 * abs(hi))
    return lo - pad, hi + pad


def _median_series(rows: list[CurveRow]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    seeds = sorted({r.seed for r in rows})
    grid = np.array(sorted({r.env_steps for r in rows}), dtype=float)
    per_seed = []
    for seed in seeds:
        series = sorted((r.env_steps, r.episodic_return) for r in rows if r.seed == seed)
        xs = np.array([s[0] for s in series], dtype=float)
        ys = np.array([s[1] for s in series])
        idx = np.searchsorted(xs, grid, side="right") - 1
        idx = np.clip(idx, 0, len(xs) - 1)
        per_seed.append(ys[idx])
    stacked = np.stack(per_seed)
    return (grid, np.median(stacked, axis=0), np.percentile(stacked, 25, axis=0),
            np.percentile(stacked, 75, axis=0))


def emit_plot(rows: list[CurveRow], out_path: str) -> None:
    """Median return vs env steps per method with interquartile shading,
    written as a standalone SVG (no external renderer).

    Data ranges (5%-padded) are recorded as data-* attributes on the root
    element so the plot can be checked by parsing the file back.
    """
    if not rows:
        raise NoDataError("cannot plot an empty curve")
    width, height = 640, 420
    ml, mr, mt, mb = 70, 20, 30, 50
    x_lo, x_hi = _pad_range(min(r.env_steps for r in rows),
                            max(r.env_steps for r in rows))
    y_lo, y_hi = _pad_range(min(r.episodic_return for r in rows),
                            max(r.episodic_return for r in rows))

    def px(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    methods = sorted({r.method for r in rows})
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" data-x-min="{x_lo!r}" data-x-max="{x_hi!r}" '
        f'data-y-min="{y_lo!r}" data-y-max="{y_hi!r}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" '
        f'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<text class="tick" x="{px(xv):.1f}" y="{height - mb + 18}" '
                     f'font-size="11" text-anchor="middle">{xv:.0f}</text>')
        parts.append(f'<text class="tick" x="{ml - 8}" y="{py(yv):.1f}" font-size="11" '
                     f'text-anchor="end">{yv:.1f}</text>')
    parts.append(f'<text x="{(ml + width - mr) / 2}" y="{height - 12}" font-size="12" '
                 f'text-anchor="middle">environment steps</text>')
    parts.append(f'<text x="16" y="{(mt + height - mb) / 2}" font-size="12" '
                 f'text-anchor="middle" transform="rotate(-90 16 '
                 f'{(mt + height - mb) / 2})">episodic return</text>')

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    for i, method in enumerate(methods):
        color = _PLOT_COLORS.get(method, palette[i % len(palette)])
        grid, med, q25, q75 = _median_series([r for r in rows if r.method == method])
        band = (" ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(grid, q75))
                + " " + " ".join(f"{px(x):.2f},{py(y):.2f}"
                                 for x, y in zip(grid[::-1], q25[::-1])))
        parts.append(f'<polygon class="iqr" points="{band}" fill="{color}" '
                     f'fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(grid, med))
        parts.append(f'<polyline class="median" points="{line}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(grid, med):
            parts.append(f'<circle class="pt" cx="{px(x):.2f}" cy="{py(y):.2f}" '
                         f'r="2.5" fill="{color}"/>')
        ly = mt + 16 * (i + 1)
        parts.append(f'<rect x="{width - mr - 130}" y="{ly - 9}" width="12" height="3" '
                     f'fill="{color}"/>')
        parts.append(f'<text class="legend" x="{width - mr - 112}" y="{ly}" '
                     f'font-size="12">{method}</text>')
    parts.append("</svg>")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
