"""Experiment configs, seeded runs, method x attack sweeps and result files.

A config is a YAML mapping; unknown keys are rejected so typos fail fast.
Results go under ``$BDTD_OUTPUT_ROOT`` (default ``./results``), one fresh
directory per invocation. Nothing is ever written into an existing run
directory.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__, _kernels
from .adversary import ATTACKS, CONSISTENCY, AttackModel
from .aggregation import RULES, AggregationRule
from .errors import ConfigurationError
from .features import (
    ObservationFeatures,
    constant_features,
    default_radius,
    random_unit_features,
    scalar_features,
    tabular_features,
)
from .mdp import make_grid_spread_env, make_random_mdp, uniform_policy
from .protocol import PROJECTIONS, AgentRoster, StepSchedule, run_bdtd

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS_CSV_VERSION = 1
OUTPUT_ROOT_ENV = "BDTD_OUTPUT_ROOT"

METHOD_LABELS = {
    "trimmed_mean": "BDTD",
    "fedavg": "FedAvg",
    "krum": "Krum",
    "coordinate_median": "Median",
    "fltrust": "FLTrust",
    "scclip": "SCClip",
}
REFERENCE_LABEL = "FedAvg w/o attacks"

# every accepted key and its default; None under a section means "required"
_DEFAULTS: dict = {
    "schema_version": None,
    "name": "experiment",
    "environment": {
        "kind": "grid_spread",
        "seed": 0,
        # grid_spread
        "grid_size": 5,
        "num_landmarks": None,
        "collision_penalty": -1.0,
        "shaping_scale": 0.1,
        "offset_scale": 0.1,
        # random_mdp
        "state_count": 5,
        "actions_per_agent": 2,
        "r_max": 1.0,
    },
    "agents": {
        "n": 10,
        "f": 2,
        "byzantine": [],
        "include_self": True,
        "init": "zeros",
        "init_scale": 0.5,
    },
    "rule": {"kind": "trimmed_mean", "krum_subset": "n-f", "scclip_tau": None},
    "attack": {
        "kind": "none",
        "consistency": "per_neighbor",
        "fixed_value": 0.0,
        "trim_band": 4.0,
        "krum_lambda_max": None,
        "krum_search_steps": 30,
    },
    "features": {"mode": "observation", "dim": 4, "bias": False, "seed": 0, "low": 0.5, "high": 1.0},
    "discount": 0.9,
    "step_size": {"kind": "constant", "eta0": 0.1},
    "projection": {"radius": "auto", "mode": "coordinate", "exclusion": "auto"},
    "network": {"drop_prob": 0.0, "default_value": 0.0},
    "horizon": 1000,
    "seeds": [0],
    "workers": 1,
    "save_traces": True,
}

ENV_KINDS = ("grid_spread", "random_mdp")
FEATURE_MODES = ("observation", "scalar", "constant", "random", "tabular")
INIT_MODES = ("zeros", "uniform")


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        value = given.get(key, default)
        if isinstance(default, dict):
            if value is None:
                value = {}
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where}{key} must be a mapping")
            value = _merge(default, value, f"{where}{key}.")
        out[key] = copy.deepcopy(value)
    return out


def _seed_list(seeds) -> list[int]:
    if isinstance(seeds, int):
        return list(range(seeds))
    if isinstance(seeds, dict):
        if set(seeds) - {"start", "count"} or "count" not in seeds:
            raise ConfigurationError("seeds mapping takes 'count' and optional 'start'")
        start = int(seeds.get("start", 0))
        return list(range(start, start + int(seeds["count"])))
    try:
        out = [int(s) for s in seeds]
    except (TypeError, ValueError) as exc:
        raise ConfigurationError("seeds must be a list of integers, a count, or {start, count}") from exc
    if len(set(out)) != len(out):
        raise ConfigurationError("duplicate seeds")
    return out


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A validated experiment description (see ``configs/`` for examples)."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a mapping")
        if "schema_version" not in raw:
            raise ConfigurationError("config is missing schema_version")
        if raw["schema_version"] != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {raw['schema_version']!r}")
        data = _merge(_DEFAULTS, raw, "")
        data["seeds"] = _seed_list(data["seeds"])
        data["agents"]["byzantine"] = sorted(int(b) for b in data["agents"]["byzantine"])
        cfg = cls(data)
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigurationError(f"cannot read {path}: {exc}") from exc
        return cls.from_dict(raw)

    def validate(self) -> None:
        d = self.data
        env, ag = d["environment"], d["agents"]
        if env["kind"] not in ENV_KINDS:
            raise ConfigurationError(f"environment.kind must be one of {ENV_KINDS}")
        if d["features"]["mode"] not in FEATURE_MODES:
            raise ConfigurationError(f"features.mode must be one of {FEATURE_MODES}")
        if env["kind"] == "grid_spread" and d["features"]["mode"] != "observation":
            raise ConfigurationError("grid_spread supports only observation features")
        if env["kind"] == "random_mdp" and d["features"]["mode"] == "observation":
            raise ConfigurationError("observation features need the grid_spread environment")
        if ag["init"] not in INIT_MODES:
            raise ConfigurationError(f"agents.init must be one of {INIT_MODES}")
        if d["rule"]["kind"] not in RULES:
            raise ConfigurationError(f"rule.kind must be one of {RULES}")
        if d["attack"]["kind"] not in ATTACKS:
            raise ConfigurationError(f"attack.kind must be one of {ATTACKS}")
        if d["attack"]["consistency"] not in CONSISTENCY:
            raise ConfigurationError(f"attack.consistency must be one of {CONSISTENCY}")
        if d["projection"]["mode"] not in PROJECTIONS:
            raise ConfigurationError(f"projection.mode must be one of {PROJECTIONS}")
        if d["projection"]["exclusion"] not in ("auto", True, False):
            raise ConfigurationError("projection.exclusion must be auto, true or false")
        radius = d["projection"]["radius"]
        if radius != "auto" and radius is not None and not (isinstance(radius, (int, float)) and radius > 0):
            raise ConfigurationError("projection.radius must be 'auto', null or a positive number")
        if radius == "auto" and d["projection"]["mode"] != "none" and d["features"]["mode"] not in ("scalar", "constant"):
            raise ConfigurationError("radius 'auto' needs scalar features; give a number")
        if not isinstance(d["horizon"], int) or d["horizon"] < 1:
            raise ConfigurationError("horizon must be an integer >= 1")
        if not d["seeds"]:
            raise ConfigurationError("at least one seed is required")
        if int(d["workers"]) < 1:
            raise ConfigurationError("workers must be >= 1")
        # constructs and validates the roster, rule, attack and schedule
        self.roster()
        self.rule()
        self.attack()
        self.schedule()

    # ------------------------------------------------------------------ #

    @property
    def name(self) -> str:
        return str(self.data["name"])

    @property
    def seeds(self) -> list[int]:
        return list(self.data["seeds"])

    @property
    def horizon(self) -> int:
        return int(self.data["horizon"])

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def replace(self, **sections) -> "ExperimentConfig":
        """New config with top-level keys or section entries overridden."""
        raw = copy.deepcopy(self.data)
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key].update(value)
            else:
                raw[key] = value
        return ExperimentConfig.from_dict(raw)

    def roster(self, d: int | None = None) -> AgentRoster:
        ag = self.data["agents"]
        init = None
        if ag["init"] == "uniform" and d is not None:
            rng = np.random.default_rng([int(self.data["environment"]["seed"]), 7])
            init = rng.uniform(-1.0, 1.0, size=(ag["n"], d)) * float(ag["init_scale"])
        return AgentRoster(int(ag["n"]), int(ag["f"]), tuple(ag["byzantine"]), init, bool(ag["include_self"]))

    def rule(self) -> AggregationRule:
        r = self.data["rule"]
        return AggregationRule(r["kind"], int(self.data["agents"]["f"]), r["krum_subset"], r["scclip_tau"])

    def attack(self) -> AttackModel:
        a = self.data["attack"]
        return AttackModel(
            a["kind"],
            a["consistency"],
            float(a["fixed_value"]),
            float(a["trim_band"]),
            a["krum_lambda_max"],
            int(a["krum_search_steps"]),
            self.data["rule"]["krum_subset"],
        )

    def schedule(self) -> StepSchedule:
        s = self.data["step_size"]
        return StepSchedule(s["kind"], float(s["eta0"]))

    def build(self):
        """Environment, policy, features and resolved radius."""
        d, env_cfg, fc = self.data, self.data["environment"], self.data["features"]
        n, gamma = int(d["agents"]["n"]), float(d["discount"])
        if env_cfg["kind"] == "grid_spread":
            env = make_grid_spread_env(
                int(env_cfg["grid_size"]),
                n,
                env_cfg["num_landmarks"],
                float(env_cfg["collision_penalty"]),
                int(env_cfg["seed"]),
                shaping_scale=float(env_cfg["shaping_scale"]),
                offset_scale=float(env_cfg["offset_scale"]),
                discount=gamma,
            )
            features = ObservationFeatures(env, bias=bool(fc["bias"]))
        else:
            env = make_random_mdp(
                int(env_cfg["state_count"]),
                n,
                int(env_cfg["actions_per_agent"]),
                int(env_cfg["seed"]),
                r_max=float(env_cfg["r_max"]),
                discount=gamma,
            )
            S, mode = env.state_count, fc["mode"]
            if mode == "scalar":
                features = scalar_features(S, int(fc["seed"]), float(fc["low"]), float(fc["high"]))
            elif mode == "constant":
                features = constant_features(S, float(fc["high"]))
            elif mode == "random":
                features = random_unit_features(S, int(fc["dim"]), int(fc["seed"]))
            else:
                features = tabular_features(S)
        policy = uniform_policy(env.action_counts)
        radius = d["projection"]["radius"]
        if d["projection"]["mode"] == "none" or radius is None:
            radius = None
        elif radius == "auto":
            radius = default_radius(env.r_max, features.phi_min, gamma)
        else:
            radius = float(radius)
        return env, policy, features, radius

    def exclusion(self) -> bool:
        ex = self.data["projection"]["exclusion"]
        if ex == "auto":
            # the out-of-ball exclusion step belongs to BDTD; baselines only project
            return self.data["rule"]["kind"] == "trimmed_mean"
        return bool(ex)


# --------------------------------------------------------------------------- #
# single runs


@dataclass(frozen=True)
class SeedResult:
    seed: int
    sbe: np.ndarray
    msbe: np.ndarray
    ce: np.ndarray
    digest: str
    exclusions: int
    trace_files: tuple[str, ...] = ()


def _run_seed(payload) -> SeedResult:
    data, seed, seed_dir = payload
    cfg = ExperimentConfig(data)
    env, policy, features, radius = cfg.build()
    trace = run_bdtd(
        env,
        policy,
        features,
        cfg.roster(features.dim),
        cfg.rule(),
        cfg.attack(),
        cfg.schedule(),
        radius,
        cfg.horizon,
        seed,
        projection=data["projection"]["mode"],
        exclusion=cfg.exclusion(),
        default_value=float(data["network"]["default_value"]),
        drop_prob=float(data["network"]["drop_prob"]),
        config_hash=cfg.config_hash(),
    )
    files: tuple[str, ...] = ()
    if seed_dir is not None:
        seed_dir = Path(seed_dir)
        seed_dir.mkdir(parents=True, exist_ok=False)
        write_metrics_csv(seed_dir / "metrics.csv", trace.sbe, trace.msbe, trace.ce[1:])
        written = [seed_dir / "metrics.csv"]
        if data["save_traces"]:
            written.append(trace.write_csv(seed_dir / "trace.csv"))
        written.append(trace.write_manifest(seed_dir / "manifest.json", data))
        files = tuple(str(p) for p in written)
    return SeedResult(seed, trace.sbe, trace.msbe, trace.ce[1:], trace.digest(), len(trace.exclusions), files)


def _map(fn, payloads, workers: int):
    if workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, payloads))


def write_metrics_csv(path, sbe, msbe, ce, extra: dict | None = None) -> Path:
    """Columns: round (1-based), sbe, msbe, ce (after that round)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "sbe", "msbe", "ce"])
        for k in range(len(msbe)):
            w.writerow([k + 1, repr(float(sbe[k])), repr(float(msbe[k])), repr(float(ce[k]))])
    return path


def read_series_csv(path) -> dict[str, np.ndarray]:
    """Read any metric CSV written here into named float columns."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [() for _ in header]
    return {h: np.array([float(x) for x in c]) for h, c in zip(header, cols)}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "results"))


def fresh_dir(parent: Path, stem: str) -> Path:
    """Create and return parent/stem-NNN with the first unused NNN."""
    parent.mkdir(parents=True, exist_ok=True)
    i = 1
    while True:
        path = parent / f"{stem}-{i:03d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            i += 1


@dataclass(frozen=True)
class ExperimentResult:
    directory: Path | None
    config: ExperimentConfig
    seeds: list[SeedResult]

    @property
    def mean_msbe(self) -> np.ndarray:
        return np.mean([s.msbe for s in self.seeds], axis=0)

    @property
    def mean_ce(self) -> np.ndarray:
        return np.mean([s.ce for s in self.seeds], axis=0)

    @property
    def mean_sbe(self) -> np.ndarray:
        return np.mean([s.sbe for s in self.seeds], axis=0)


def run_experiment(config: ExperimentConfig, out_dir=None, *, write: bool = True) -> ExperimentResult:
    """Run every seed and write per-seed and seed-averaged results.

    Layout of the run directory::

        config.yaml  manifest.json  metrics_mean.csv
        seed-<s>/metrics.csv  seed-<s>/trace.csv  seed-<s>/manifest.json
    """
    run_dir = None
    if write:
        parent = Path(out_dir) if out_dir is not None else output_root()
        run_dir = fresh_dir(parent, f"{config.name}-{config.config_hash()[:10]}")
        (run_dir / "config.yaml").write_text(config.to_yaml())
    payloads = [(config.data, s, None if run_dir is None else run_dir / f"seed-{s}") for s in config.seeds]
    results = _map(_run_seed, payloads, int(config.data["workers"]))
    res = ExperimentResult(run_dir, config, results)
    if run_dir is not None:
        write_metrics_csv(run_dir / "metrics_mean.csv", res.mean_sbe, res.mean_msbe, res.mean_ce)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "metrics_csv_version": METRICS_CSV_VERSION,
            "code_version": __version__,
            "backend": _kernels.backend(),
            "config_hash": config.config_hash(),
            "config": config.data,
            "num_runs": len(results),
            "seeds": [r.seed for r in results],
            "trace_digests": {str(r.seed): r.digest for r in results},
            "final_msbe": float(res.mean_msbe[-1]),
            "final_ce": float(res.mean_ce[-1]),
        }
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return res


# --------------------------------------------------------------------------- #
# method x attack matrix

_MATRIX_KEYS = {"schema_version", "name", "base", "methods", "attacks", "reference"}


@dataclass(frozen=True, eq=False)
class MatrixSpec:
    name: str
    cells: list  # [(method, attack, ExperimentConfig)]
    reference: ExperimentConfig | None
    methods: list[str]
    attacks: list[str]


def load_matrix(raw_or_path) -> MatrixSpec:
    """Build a sweep from a mapping with ``base``, ``methods`` and ``attacks``.

    ``base`` is a full experiment config (rule and attack kinds are filled in
    per cell). ``reference: true`` adds a FedAvg run with no Byzantine agents.
    """
    if isinstance(raw_or_path, (str, Path)):
        try:
            raw = yaml.safe_load(Path(raw_or_path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot load matrix config: {exc}") from exc
    else:
        raw = raw_or_path
    if not isinstance(raw, dict):
        raise ConfigurationError("matrix config must be a mapping")
    unknown = set(raw) - _MATRIX_KEYS
    if unknown:
        raise ConfigurationError(f"unknown key(s) in matrix config: {sorted(unknown)}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError("matrix config needs schema_version: 1")
    base = dict(raw.get("base") or {})
    base.setdefault("schema_version", SCHEMA_VERSION)
    methods = list(raw.get("methods", list(RULES)))
    attacks = list(raw.get("attacks") or [])
    name = str(raw.get("name", "matrix"))
    cells = []
    for attack in attacks:
        for method in methods:
            cfg = dict(copy.deepcopy(base))
            cfg["name"] = f"{name}-{method}-{attack}"
            cfg["rule"] = {**cfg.get("rule", {}), "kind": method}
            cfg["attack"] = {**cfg.get("attack", {}), "kind": attack}
            cells.append((method, attack, ExperimentConfig.from_dict(cfg)))
    reference = None
    if raw.get("reference", True):
        cfg = copy.deepcopy(base)
        cfg["name"] = f"{name}-reference"
        cfg["rule"] = {**cfg.get("rule", {}), "kind": "fedavg"}
        cfg["attack"] = {**cfg.get("attack", {}), "kind": "none"}
        cfg["agents"] = {**cfg.get("agents", {}), "f": 0, "byzantine": []}
        reference = ExperimentConfig.from_dict(cfg)
    return MatrixSpec(name, cells, reference, methods, attacks)


def _env_signature(cfg: ExperimentConfig) -> str:
    d = cfg.data
    keys = ("environment", "features", "discount", "horizon", "seeds", "step_size")
    return json.dumps({k: d[k] for k in keys} | {"n": d["agents"]["n"]}, sort_keys=True)


def _write_columns(path: Path, columns: dict[str, np.ndarray]) -> Path:
    names = list(columns)
    length = len(next(iter(columns.values())))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round"] + names)
        for k in range(length):
            w.writerow([k + 1] + [repr(float(columns[c][k])) for c in names])
    return path


@dataclass(frozen=True)
class MatrixResult:
    directory: Path | None
    summary: list[dict]
    csv_files: list[Path]
    charts: list[Path]

    def final(self, method: str, attack: str, metric: str = "msbe") -> float:
        for row in self.summary:
            if row["method"] == method and row["attack"] == attack:
                return row[f"final_{metric}"]
        raise KeyError((method, attack))


def run_matrix(spec: MatrixSpec, out_dir=None, *, workers: int = 1, charts: bool = True) -> MatrixResult:
    """Run every (method, attack) cell plus the reference and emit tables and charts.

    Per attack: ``msbe_<attack>.csv`` and ``ce_<attack>.csv`` with one column
    per method and the reference, and an SVG chart drawn from each CSV. With
    no attacks only the reference chart is drawn.
    """
    configs = [c for _, _, c in spec.cells] + ([spec.reference] if spec.reference is not None else [])
    if not configs:
        raise ConfigurationError("matrix has no cells and no reference run")
    signatures = {_env_signature(c) for c in configs}
    if len(signatures) > 1:
        raise ConfigurationError("matrix cells do not share one environment setup")

    payloads, owners = [], []
    for idx, cfg in enumerate(configs):
        for s in cfg.seeds:
            payloads.append((cfg.data, s, None))
            owners.append(idx)
    flat = _map(_run_seed, payloads, workers)
    grouped: list[list[SeedResult]] = [[] for _ in configs]
    for idx, r in zip(owners, flat):
        grouped[idx].append(r)
    results = [ExperimentResult(None, c, g) for c, g in zip(configs, grouped)]
    ref = results[-1] if spec.reference is not None else None

    out = Path(out_dir) if out_dir is not None else output_root()
    mdir = fresh_dir(out, f"{spec.name}-matrix")
    summary, csv_files, chart_files = [], [], []
    for (method, attack, _), res in zip(spec.cells, results):
        summary.append(
            {
                "method": method,
                "label": METHOD_LABELS[method],
                "attack": attack,
                "final_msbe": float(res.mean_msbe[-1]),
                "final_ce": float(res.mean_ce[-1]),
                "runs": len(res.seeds),
            }
        )
    if ref is not None:
        summary.append(
            {
                "method": "reference",
                "label": REFERENCE_LABEL,
                "attack": "none",
                "final_msbe": float(ref.mean_msbe[-1]),
                "final_ce": float(ref.mean_ce[-1]),
                "runs": len(ref.seeds),
            }
        )
    groups = [(a, [(m, r) for (m, aa, _), r in zip(spec.cells, results) if aa == a]) for a in spec.attacks]
    if not groups:
        groups = [("reference", [])]
    for attack, cells in groups:
        for metric in ("msbe", "ce"):
            cols = {METHOD_LABELS[m]: getattr(r, f"mean_{metric}") for m, r in cells}
            if ref is not None:
                cols[REFERENCE_LABEL] = getattr(ref, f"mean_{metric}")
            if not cols:
                continue
            path = _write_columns(mdir / f"{metric}_{attack}.csv", cols)
            csv_files.append(path)
            if charts:
                from .plotting import plot_csv

                title = f"{metric.upper()} under {attack}" if attack != "reference" else f"{metric.upper()}, reference"
                chart_files.append(plot_csv(path, path.with_suffix(".svg"), title=title, ylabel=metric.upper()))
    with (mdir / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "label", "attack", "final_msbe", "final_ce", "runs"])
        w.writeheader()
        for row in summary:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "backend": _kernels.backend(),
        "methods": spec.methods,
        "attacks": spec.attacks,
        "config_hashes": {f"{m}/{a}": c.config_hash() for m, a, c in spec.cells},
        "reference_hash": None if spec.reference is None else spec.reference.config_hash(),
        "runs_per_cell": {f"{s['method']}/{s['attack']}": s["runs"] for s in summary},
    }
    (mdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return MatrixResult(mdir, summary, csv_files, chart_files)


def format_summary(summary: list[dict]) -> str:
    lines = [f"{'method':<20} {'attack':<12} {'final MSBE':>12} {'final CE':>12}"]
    for row in summary:
        lines.append(f"{row['label']:<20} {row['attack']:<12} {row['final_msbe']:>12.6g} {row['final_ce']:>12.6g}")
    return "\n".join(lines)
