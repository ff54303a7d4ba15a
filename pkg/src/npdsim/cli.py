"""Command-line driver: run experiments from config files, resume from
checkpoints, and re-analyze stored CSV series.

Config files are INI-style key/value sections ([run], [scenario], [stepper],
optional [experiment]); see configs/ and the repository README for the
schema.  All CSV output uses 17 significant digits so files are round-trip
exact and byte-identical across reruns of the same config."""

from __future__ import annotations

import argparse
import configparser
import json
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    csv_header,
    fit_decay_rate,
    format_float,
    observe,
    record_to_row,
    v_distance,
)
from .model import (
    BodyCharge,
    NpdState,
    SpeciesParams,
    charge_density,
    tendency,
    validate_state,
)
from .scenarios import ScenarioSpec, neutral_body_charge, random_state
from .spectral import NonNeutralSource, make_grid, random_band_limited
from .tangent import UnderResolved, volume_decay_experiment
from .timestepper import (
    NegativityBreach,
    NonFinite,
    StepperConfig,
    TimeoutIncomplete,
    _negativity_floor,
    integrate,
    stable_dt,
    step,
)

EXPERIMENTS = (
    "decay_no_body_charge",
    "attractor_with_body_charge",
    "twin_lipschitz",
    "backward_uniqueness_probe",
    "volume_decay",
    "invariant_suite",
)
SCHEMA_VERSION = 1
CHECKPOINT_MAGIC = b"NPDCKPT1"


class ConfigError(Exception):
    """Config file is malformed; message names the offending section/field."""


class CheckpointError(Exception):
    """Checkpoint file is unreadable or inconsistent."""


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioSpec
    stepper: StepperConfig
    experiment: str
    output_dir: str
    checkpoint_every: float
    extras: dict


# -- config parsing -----------------------------------------------------------


def _get(cp, section, key, cast, default=..., choices=None):
    if not cp.has_section(section):
        if default is ...:
            raise ConfigError(f"missing section [{section}]")
        return default
    if not cp.has_option(section, key):
        if default is ...:
            raise ConfigError(f"[{section}] missing required field '{key}'")
        return default
    raw = cp.get(section, key)
    try:
        val = cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] field '{key}': cannot parse {raw!r} ({exc})")
    if choices is not None and val not in choices:
        raise ConfigError(f"[{section}] field '{key}': {val!r} not one of {choices}")
    return val


def _floats(raw: str):
    return tuple(float(x) for x in raw.replace(",", " ").split())


def _ints(raw: str):
    return tuple(int(x) for x in raw.replace(",", " ").split())


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _dt_value(raw: str):
    raw = raw.strip()
    if raw == "auto":
        return "auto"
    return float(raw)


def parse_config(path) -> RunConfig:
    cp = configparser.ConfigParser()
    read = cp.read([str(path)])
    if not read:
        raise ConfigError(f"config file not found: {path}")

    version = _get(cp, "run", "schema_version", int)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"[run] field 'schema_version': expected {SCHEMA_VERSION}, got {version}"
        )
    experiment = _get(cp, "run", "experiment", str, choices=EXPERIMENTS)
    output_dir = _get(cp, "run", "output_dir", str)
    checkpoint_every = _get(cp, "run", "checkpoint_every", float, default=0.0)

    try:
        scenario = ScenarioSpec(
            dim=_get(cp, "scenario", "dim", int, default=3),
            n=_get(cp, "scenario", "n", int),
            diffusivity=_get(cp, "scenario", "diffusivity", float, default=1.0),
            valences=_get(cp, "scenario", "valences", _floats),
            means=_get(cp, "scenario", "means", _floats),
            eps=_get(cp, "scenario", "eps", float, default=0.1),
            k_max=_get(cp, "scenario", "k_max", float, default=None),
            charge_fraction=_get(cp, "scenario", "charge_fraction", float, default=1.0),
            seed=_get(cp, "scenario", "seed", int, default=0),
            body=_get(cp, "scenario", "body", str, default="none"),
            body_amplitude=_get(cp, "scenario", "body_amplitude", float, default=0.0),
            body_k_max=_get(cp, "scenario", "body_k_max", float, default=2.0),
            body_seed=_get(cp, "scenario", "body_seed", int, default=1),
        )
    except ValueError as exc:
        raise ConfigError(f"[scenario] {exc}")
    try:
        make_grid(scenario.dim, scenario.n)
    except ValueError as exc:
        raise ConfigError(f"[scenario] {exc}")

    try:
        stepper = StepperConfig(
            dt=_get(cp, "stepper", "dt", _dt_value, default="auto"),
            cfl=_get(cp, "stepper", "cfl", float, default=0.4),
            t_end=_get(cp, "stepper", "t_end", float),
            output_every=_get(cp, "stepper", "output_every", float),
            max_steps=_get(cp, "stepper", "max_steps", int, default=1_000_000),
            dt_max=_get(cp, "stepper", "dt_max", float, default=0.02),
            refresh_every=_get(cp, "stepper", "refresh_every", int, default=10),
        )
    except ValueError as exc:
        raise ConfigError(f"[stepper] {exc}")

    extras = {}
    if experiment in ("decay_no_body_charge", "attractor_with_body_charge"):
        extras["fit_t0"] = _get(
            cp, "experiment", "fit_t0", float, default=min(1.0, 0.5 * stepper.t_end)
        )
        extras["fit_t1"] = _get(cp, "experiment", "fit_t1", float, default=stepper.t_end)
        extras["window_t0"] = _get(
            cp, "experiment", "window_t0", float, default=0.5 * stepper.t_end
        )
    elif experiment == "twin_lipschitz":
        extras["delta"] = _get(cp, "experiment", "delta", float, default=1e-4)
        extras["perturb_seed"] = _get(cp, "experiment", "perturb_seed", int, default=123)
        extras["perturb_k_max"] = _get(
            cp, "experiment", "perturb_k_max", float, default=scenario.effective_k_max
        )
    elif experiment == "backward_uniqueness_probe":
        extras["delta"] = _get(cp, "experiment", "delta", float, default=1e-3)
        extras["perturb_seed"] = _get(cp, "experiment", "perturb_seed", int, default=123)
        extras["perturb_k_max"] = _get(
            cp, "experiment", "perturb_k_max", float, default=scenario.effective_k_max
        )
    elif experiment == "volume_decay":
        extras["n_list"] = _get(cp, "experiment", "n_list", _ints, default=(2, 4, 8))
        extras["t0"] = _get(cp, "experiment", "t0", float, default=0.5 * stepper.t_end)
        extras["t1"] = _get(cp, "experiment", "t1", float, default=stepper.t_end)
        extras["renorm_every"] = _get(cp, "experiment", "renorm_every", int, default=5)
        extras["tangent_seed"] = _get(cp, "experiment", "tangent_seed", int, default=0)
        extras["tangent_k_max"] = _get(
            cp, "experiment", "tangent_k_max", float, default=scenario.effective_k_max
        )
        extras["r_zero"] = _get(cp, "experiment", "r_zero", _bool, default=False)

    if scenario.body == "none" and experiment == "attractor_with_body_charge":
        raise ConfigError(
            "[scenario] field 'body': attractor_with_body_charge needs a body charge"
        )
    if checkpoint_every > 0:
        if experiment not in ("decay_no_body_charge", "attractor_with_body_charge"):
            raise ConfigError(
                "[run] field 'checkpoint_every': checkpoints are only supported "
                "for single-trajectory experiments"
            )
        ratio = checkpoint_every / stepper.output_every
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError(
                "[run] field 'checkpoint_every': must be a positive integer "
                "multiple of output_every for restart transparency"
            )

    return RunConfig(
        scenario=scenario,
        stepper=stepper,
        experiment=experiment,
        output_dir=output_dir,
        checkpoint_every=checkpoint_every,
        extras=extras,
    )


# -- checkpoints ----------------------------------------------------------------


def checkpoint_save(state: NpdState, params: SpeciesParams, body: BodyCharge, path) -> None:
    """Binary layout: magic, u64 (dim, n, N), f64 (time, D, z_1..z_N), then
    N+1 raw f64 arrays (c_1..c_N, rho_tilde) with x varying fastest."""
    grid = state.grid
    n_species = state.n_species
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QQQ", grid.dim, grid.n, n_species))
        fh.write(struct.pack("<d", state.time))
        fh.write(struct.pack("<d", params.diffusivity))
        fh.write(struct.pack(f"<{n_species}d", *params.valences))
        for arr in list(state.c) + [body.rho_tilde]:
            fh.write(np.asarray(arr.T, dtype="<f8").tobytes())


def checkpoint_load(path):
    """Inverse of checkpoint_save; returns (state, params, body) bit-exactly."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    try:
        dim, n, n_species = struct.unpack_from("<QQQ", raw, off)
        off += 24
        (time,) = struct.unpack_from("<d", raw, off)
        off += 8
        (diffusivity,) = struct.unpack_from("<d", raw, off)
        off += 8
        valences = struct.unpack_from(f"<{n_species}d", raw, off)
        off += 8 * n_species
    except struct.error as exc:
        raise CheckpointError(f"truncated header: {exc}")
    field_bytes = 8 * n**dim
    expected = off + (n_species + 1) * field_bytes
    if len(raw) != expected:
        raise CheckpointError(
            f"size mismatch: expected {expected} bytes, file has {len(raw)}"
        )
    grid = make_grid(int(dim), int(n))
    shape_t = tuple(reversed(grid.shape))
    fields = []
    for _ in range(n_species + 1):
        arr = np.frombuffer(raw, dtype="<f8", count=n**dim, offset=off).reshape(shape_t).T
        fields.append(np.ascontiguousarray(arr))
        off += field_bytes
    params = SpeciesParams(diffusivity=diffusivity, valences=tuple(valences))
    state = NpdState(grid=grid, time=time, c=fields[:n_species])
    body = BodyCharge(grid=grid, rho_tilde=fields[n_species])
    return state, params, body


# -- CSV plumbing ---------------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_float(x) for x in row) + "\n")


def read_csv(path):
    """Read one of our CSVs back as (header list, column dict of float arrays)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty CSV")
    header = lines[0].split(",")
    data = [[float(x) for x in ln.split(",")] for ln in lines[1:]]
    if not data:
        raise ConfigError(f"{path}: CSV has a header but no rows")
    arr = np.asarray(data)
    if arr.shape[1] != len(header):
        raise ConfigError(f"{path}: row width does not match header")
    return header, {name: arr[:, i] for i, name in enumerate(header)}


class _DiagnosticsObserver:
    """Collects records and appends CSV rows at every output boundary."""

    def __init__(self, params, body, path, skip_first=False):
        self.params = params
        self.body = body
        self.path = path
        self.skip_first = skip_first
        self.records = []
        self._header_written = False

    def __call__(self, state) -> None:
        prev = self.records[-1] if self.records else None
        rec = observe(state, self.params, self.body, prev)
        self.records.append(rec)
        if self.skip_first and len(self.records) == 1:
            return
        mode = "a" if self._header_written else "w"
        with open(self.path, mode) as fh:
            if not self._header_written:
                fh.write(",".join(csv_header(len(rec.means))) + "\n")
                self._header_written = True
            fh.write(",".join(format_float(x) for x in record_to_row(rec)) + "\n")


class _CheckpointObserver:
    def __init__(self, params, body, every, outdir):
        self.params = params
        self.body = body
        self.every = every
        self.outdir = Path(outdir)
        self.written = []

    def __call__(self, state) -> None:
        if self.every <= 0 or state.time <= 0:
            return
        ratio = state.time / self.every
        if abs(ratio - round(ratio)) < 1e-9:
            path = self.outdir / f"ckpt_{int(round(ratio)):05d}.bin"
            checkpoint_save(state, self.params, self.body, path)
            self.written.append(str(path))


# -- analysis (shared by `run` reports and the `analyze` verb) ---------------------


def analyze_decay(csv_path, t0, t1):
    """Fit exponential decay of every gradient/deviation/Sobolev series."""
    header, cols = read_csv(csv_path)
    required = {"t", "H1", "H2", "H3", "L2_rho_dev"}
    if not required.issubset(header):
        raise ConfigError(f"{csv_path}: missing columns {sorted(required - set(header))}")
    t = cols["t"]
    in_window = np.sum((t >= t0) & (t <= t1))
    if in_window < 10:
        raise ConfigError(
            f"{csv_path}: fit window [{t0}, {t1}] holds {in_window} rows; need >= 10"
        )
    rows = []
    series = [h for h in header if h.startswith("gradL2_c")]
    series += ["L2_rho_dev", "L3_rho_dev", "L4_rho_dev", "L6_rho_dev", "H1", "H2", "H3"]
    for name in series:
        y = cols[name]
        fit = fit_decay_rate(t, y, window=(t0, t1))
        rows.append((name, fit))
    return rows


def _decay_report_rows(fits):
    header = ["series", "rate", "offset", "r_squared", "degenerate"]
    lines = []
    for name, fit in fits:
        lines.append(
            [
                name,
                format_float(fit.rate),
                format_float(fit.offset),
                format_float(fit.r_squared),
                "1" if fit.degenerate else "0",
            ]
        )
    return header, lines


def analyze_attractor(csv_path, window_t0):
    header, cols = read_csv(csv_path)
    if "H2" not in header:
        raise ConfigError(f"{csv_path}: missing column H2")
    t = cols["t"]
    mask = t >= window_t0 - 1e-12
    if not np.any(mask):
        raise ConfigError(f"{csv_path}: window start {window_t0} beyond series end")
    return [
        ("sup_H1", float(np.max(cols["H1"][mask]))),
        ("sup_H2", float(np.max(cols["H2"][mask]))),
        ("final_H2", float(cols["H2"][-1])),
        ("window_t0", float(window_t0)),
        ("window_t1", float(t[-1])),
    ]


def analyze_twin(csv_path):
    header, cols = read_csv(csv_path)
    for name in ("t", "sep_full", "sep_half", "ratio"):
        if name not in header:
            raise ConfigError(f"{csv_path}: missing column {name}")
    sep0 = cols["sep_full"][0]
    return [
        ("min_ratio", float(np.min(cols["ratio"]))),
        ("max_ratio", float(np.max(cols["ratio"]))),
        ("max_sep_over_initial", float(np.max(cols["sep_full"]) / sep0)),
        ("initial_sep", float(sep0)),
    ]


def analyze_backward(csv_path):
    header, cols = read_csv(csv_path)
    for name in ("t", "sep", "log_sep"):
        if name not in header:
            raise ConfigError(f"{csv_path}: missing column {name}")
    return [
        ("min_sep", float(np.min(cols["sep"]))),
        ("min_log_sep", float(np.min(cols["log_sep"]))),
    ]


def analyze_volume(csv_path, n_list, t0, t1):
    header, cols = read_csv(csv_path)
    if "t" not in header:
        raise ConfigError(f"{csv_path}: missing column t")
    t = cols["t"]
    rows = []
    for n in n_list:
        name = f"logV_{n}"
        if name not in header:
            raise ConfigError(f"{csv_path}: missing column {name}")
        mask = (t >= t0 - 1e-12) & (t <= t1 + 1e-12)
        tt, vv = t[mask], cols[name][mask]
        slope, intercept = np.polyfit(tt, vv, 1)
        fit = slope * tt + intercept
        ss_res = float(np.sum((vv - fit) ** 2))
        ss_tot = float(np.sum((vv - np.mean(vv)) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        rows.append((n, -float(slope), -float(slope) / n**2, r2, t0, t1))
    return rows


def _write_report(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for name, value in rows:
            fh.write(f"{name},{format_float(value)}\n")


def _write_rate_table(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("n,rate,rate_over_n2,fit_r2,t0,t1\n")
        for n, rate, rate_over_n2, r2, t0, t1 in rows:
            fh.write(
                ",".join(
                    [str(int(n))]
                    + [format_float(x) for x in (rate, rate_over_n2, r2, t0, t1)]
                )
                + "\n"
            )


# -- experiment runners -----------------------------------------------------------


def _build_initial(cfg: RunConfig):
    grid = cfg.scenario.grid()
    params = cfg.scenario.species_params()
    state0 = random_state(cfg.scenario, grid)
    body = neutral_body_charge(cfg.scenario, state0)
    return grid, params, state0, body


def _write_meta(cfg: RunConfig, outdir: Path) -> None:
    meta = {
        "package_version": __version__,
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment,
        "dimension_label": "canonical-3d" if cfg.scenario.dim == 3 else "extrapolation-2d",
        "mass_bound_M": cfg.scenario.mass_bound,
        "scenario": {
            "dim": cfg.scenario.dim,
            "n": cfg.scenario.n,
            "diffusivity": cfg.scenario.diffusivity,
            "valences": list(cfg.scenario.valences),
            "means": list(cfg.scenario.means),
            "eps": cfg.scenario.eps,
            "k_max": cfg.scenario.effective_k_max,
            "charge_fraction": cfg.scenario.charge_fraction,
            "seed": cfg.scenario.seed,
            "body": cfg.scenario.body,
            "body_amplitude": cfg.scenario.body_amplitude,
            "body_k_max": cfg.scenario.body_k_max,
            "body_seed": cfg.scenario.body_seed,
        },
        "stepper": {
            "dt": cfg.stepper.dt,
            "cfl": cfg.stepper.cfl,
            "t_end": cfg.stepper.t_end,
            "output_every": cfg.stepper.output_every,
            "max_steps": cfg.stepper.max_steps,
            "dt_max": cfg.stepper.dt_max,
            "refresh_every": cfg.stepper.refresh_every,
        },
        "extras": cfg.extras,
    }
    with open(outdir / "run_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_single_trajectory(cfg: RunConfig, outdir: Path, resume_from=None) -> None:
    if resume_from is None:
        _, params, state, body = _build_initial(cfg)
        skip_first = False
    else:
        state, params, body = resume_from
        skip_first = True
    diag = _DiagnosticsObserver(
        params, body, outdir / "diagnostics.csv", skip_first=skip_first
    )
    observers = [diag]
    if cfg.checkpoint_every > 0:
        observers.append(_CheckpointObserver(params, body, cfg.checkpoint_every, outdir))
    integrate(state, params, body, cfg.stepper, tuple(observers))
    if cfg.experiment == "decay_no_body_charge":
        # a resumed run only has rows after the checkpoint; clamp the window
        first_written = diag.records[1 if skip_first else 0].time
        fit_t0 = max(cfg.extras["fit_t0"], first_written)
        fits = analyze_decay(outdir / "diagnostics.csv", fit_t0, cfg.extras["fit_t1"])
        header, lines = _decay_report_rows(fits)
        with open(outdir / "report.csv", "w") as fh:
            fh.write(",".join(header) + "\n")
            for line in lines:
                fh.write(",".join(line) + "\n")
    else:
        rows = analyze_attractor(outdir / "diagnostics.csv", cfg.extras["window_t0"])
        _write_report(outdir / "report.csv", rows)


def _perturbation_fields(grid, n_species, k_max, seed, v_target):
    """Mean-free random perturbation tuple scaled to the requested H1-weighted norm."""
    rng = np.random.default_rng(seed)
    fields = [
        random_band_limited(grid, k_max, rng, normalize_sup=False)
        for _ in range(n_species)
    ]
    hats = [grid.forward(f) for f in fields]
    norm = grid.v_norm(hats)
    return [v_target / norm * f for f in fields]


def _interleaved_run(states, params, body, stepper: StepperConfig, on_output):
    """Advance several trajectories with one shared dt sequence (derived from
    the first trajectory), calling on_output(states) at every output boundary."""
    t_end = float(stepper.t_end)
    out_dt = float(stepper.output_every)
    floors = [_negativity_floor(s) for s in states]
    on_output(states)
    t = states[0].time
    j = int(round(t / out_dt))
    steps = 0
    dt_current = None
    while t < t_end - 1e-12:
        boundary = min((j + 1) * out_dt, t_end)
        seg = 0
        while t < boundary - 1e-12:
            if steps >= stepper.max_steps:
                raise TimeoutIncomplete(f"max_steps exhausted at t={t}")
            if stepper.dt == "auto":
                if seg % stepper.refresh_every == 0:
                    dt_current = stable_dt(states[0], params, body, stepper.cfl, stepper.dt_max)
            else:
                dt_current = float(stepper.dt)
            dt_step = dt_current
            remaining = boundary - t
            if remaining <= dt_step * (1 + 1e-12):
                dt_step = remaining
            states = [
                step(s, params, body, dt_step, negativity_floor=f)
                for s, f in zip(states, floors)
            ]
            if dt_step == remaining:
                for s in states:
                    s.time = boundary
            t = states[0].time
            seg += 1
            steps += 1
        j += 1
        on_output(states)
    return states


def _run_twin(cfg: RunConfig, outdir: Path) -> None:
    grid, params, base, body = _build_initial(cfg)
    delta = cfg.extras["delta"]
    pert = _perturbation_fields(
        grid, params.n_species, cfg.extras["perturb_k_max"], cfg.extras["perturb_seed"], delta
    )
    full = base.with_c([c + p for c, p in zip(base.c, pert)], 0.0)
    half = base.with_c([c + 0.5 * p for c, p in zip(base.c, pert)], 0.0)
    rows = []

    def on_output(states):
        b, f, h = states
        sep_f = v_distance(grid, f.c, b.c)
        sep_h = v_distance(grid, h.c, b.c)
        ratio = sep_f / sep_h if sep_h > 0 else float("nan")
        rows.append((b.time, sep_f, sep_h, ratio))

    _interleaved_run([base, full, half], params, body, cfg.stepper, on_output)
    _write_csv(outdir / "separation.csv", ["t", "sep_full", "sep_half", "ratio"], rows)
    _write_report(outdir / "report.csv", analyze_twin(outdir / "separation.csv"))


def _run_backward(cfg: RunConfig, outdir: Path) -> None:
    grid, params, base, body = _build_initial(cfg)
    delta = cfg.extras["delta"]
    pert = _perturbation_fields(
        grid, params.n_species, cfg.extras["perturb_k_max"], cfg.extras["perturb_seed"], delta
    )
    other = base.with_c([c + p for c, p in zip(base.c, pert)], 0.0)
    rows = []

    def on_output(states):
        a, b = states
        sep = v_distance(grid, a.c, b.c)
        rows.append((a.time, sep, np.log(sep) if sep > 0 else -np.inf))

    _interleaved_run([base, other], params, body, cfg.stepper, on_output)
    _write_csv(outdir / "separation.csv", ["t", "sep", "log_sep"], rows)
    _write_report(outdir / "report.csv", analyze_backward(outdir / "separation.csv"))


def _run_volume(cfg: RunConfig, outdir: Path) -> None:
    _, params, state0, body = _build_initial(cfg)
    ex = cfg.extras
    result = volume_decay_experiment(
        state0,
        params,
        body,
        list(ex["n_list"]),
        ex["t0"],
        ex["t1"],
        seed=ex["tangent_seed"],
        k_max=ex["tangent_k_max"],
        renorm_every=ex["renorm_every"],
        r_zero=ex["r_zero"],
        stepper=cfg.stepper,
    )
    header = ["t"] + [f"logV_{n}" for n in ex["n_list"]]
    rows = [
        [t] + [result.log_volumes[n][i] for n in ex["n_list"]]
        for i, t in enumerate(result.times)
    ]
    _write_csv(outdir / "logvolume.csv", header, rows)
    table = analyze_volume(outdir / "logvolume.csv", list(ex["n_list"]), ex["t0"], ex["t1"])
    _write_rate_table(outdir / "rates.csv", table)


INVARIANT_CHECKS_HEADER = ["check", "value", "threshold", "pass"]


def _run_invariants(cfg: RunConfig, outdir: Path) -> bool:
    grid, params, state0, body = _build_initial(cfg)
    diag = _DiagnosticsObserver(params, body, outdir / "diagnostics.csv")
    final = integrate(state0, params, body, cfg.stepper, (diag,))

    checks = []
    means0 = np.array(diag.records[0].means)
    drift = max(
        abs(np.array(rec.means) - means0).max() / means0.min() for rec in diag.records
    )
    checks.append(("species_mean_drift", drift, 1e-12))
    sup0 = max(np.max(np.abs(ci)) for ci in state0.c)
    checks.append(("min_concentration", -min(0.0, final.min_concentration()) / sup0, 1e-6))
    report = validate_state(final, params, body)
    rho = charge_density(final, params)
    neutral_scale = grid.l2_norm(rho) + grid.l2_norm(body.rho_tilde) + 1e-300
    checks.append(("neutrality_residual", report.neutrality_residual / neutral_scale, 1e-8))
    checks.append(("velocity_divergence", report.divergence_residual, 1e-10))
    f = tendency(final, params, body)
    f_scale = max(max(np.max(np.abs(fi)) for fi in f), 1e-300)
    mean_resid = max(abs(grid.integral(fi)) for fi in f) / (grid.volume * f_scale)
    checks.append(("tendency_mean_residual", mean_resid, 1e-12))
    c0 = final.c[0]
    c0_hat = grid.forward(c0)
    parseval = abs(grid.l2_norm(c0) - grid.l2_norm_spectral(c0_hat)) / grid.l2_norm(c0)
    checks.append(("parseval_residual", parseval, 1e-12))

    rows = []
    all_ok = True
    for name, value, thresh in checks:
        ok = bool(value <= thresh) and np.isfinite(value)
        all_ok &= ok
        rows.append((name, value, thresh, 1.0 if ok else 0.0))
    with open(outdir / "checks.csv", "w") as fh:
        fh.write(",".join(INVARIANT_CHECKS_HEADER) + "\n")
        for name, value, thresh, ok in rows:
            fh.write(
                f"{name},{format_float(value)},{format_float(thresh)},{int(ok)}\n"
            )
    print("PASS" if all_ok else "FAIL", "invariant suite:", outdir / "checks.csv")
    return all_ok


# -- verbs -------------------------------------------------------------------------


_SIM_ERRORS = (
    NonFinite,
    NegativityBreach,
    TimeoutIncomplete,
    NonNeutralSource,
    UnderResolved,
)


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
    except (ConfigError, configparser.Error) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    outdir = Path(args.output_dir or cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_meta(cfg, outdir)
    try:
        if cfg.experiment in ("decay_no_body_charge", "attractor_with_body_charge"):
            _run_single_trajectory(cfg, outdir)
        elif cfg.experiment == "twin_lipschitz":
            _run_twin(cfg, outdir)
        elif cfg.experiment == "backward_uniqueness_probe":
            _run_backward(cfg, outdir)
        elif cfg.experiment == "volume_decay":
            _run_volume(cfg, outdir)
        else:
            ok = _run_invariants(cfg, outdir)
            return 0 if ok else 4
    except _SIM_ERRORS as exc:
        _write_error(outdir, exc)
        print(f"simulation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


def _write_error(outdir: Path, exc: Exception) -> None:
    with open(outdir / "error.json", "w") as fh:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, fh, indent=2)
        fh.write("\n")


def cmd_resume(args) -> int:
    try:
        cfg = parse_config(args.config)
    except (ConfigError, configparser.Error) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        state, params, body = checkpoint_load(args.checkpoint)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    expect = cfg.scenario.species_params()
    if (
        params.valences != expect.valences
        or abs(params.diffusivity - expect.diffusivity) > 0
        or state.grid.n != cfg.scenario.n
        or state.grid.dim != cfg.scenario.dim
    ):
        print("checkpoint error: checkpoint does not match the config", file=sys.stderr)
        return 2
    outdir = Path(args.output_dir or (cfg.output_dir + "_resume"))
    outdir.mkdir(parents=True, exist_ok=True)
    _write_meta(cfg, outdir)
    try:
        _run_single_trajectory(cfg, outdir, resume_from=(state, params, body))
    except _SIM_ERRORS as exc:
        _write_error(outdir, exc)
        print(f"simulation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


def cmd_validate(args) -> int:
    try:
        cfg = parse_config(args.config)
    except (ConfigError, configparser.Error) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"OK: {args.config} ({cfg.experiment})")
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out)
    try:
        if args.experiment in ("decay_no_body_charge",):
            fits = analyze_decay(args.csv, args.t0, args.t1)
            header, lines = _decay_report_rows(fits)
            with open(out, "w") as fh:
                fh.write(",".join(header) + "\n")
                for line in lines:
                    fh.write(",".join(line) + "\n")
        elif args.experiment == "attractor_with_body_charge":
            _write_report(out, analyze_attractor(args.csv, args.t0))
        elif args.experiment == "twin_lipschitz":
            _write_report(out, analyze_twin(args.csv))
        elif args.experiment == "backward_uniqueness_probe":
            _write_report(out, analyze_backward(args.csv))
        elif args.experiment == "volume_decay":
            n_list = [int(x) for x in args.n_list.split(",")] if args.n_list else None
            if n_list is None:
                header, _ = read_csv(args.csv)
                n_list = [int(h.split("_")[1]) for h in header if h.startswith("logV_")]
            _write_rate_table(out, analyze_volume(args.csv, n_list, args.t0, args.t1))
        else:
            print(f"analyze does not apply to {args.experiment}", file=sys.stderr)
            return 2
    except (ConfigError, OSError, ValueError) as exc:
        print(f"analyze error: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="npd", description="electrodiffusion-in-porous-media experiment driver"
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", default=None)
    p_run.set_defaults(func=cmd_run)

    p_res = sub.add_parser("resume", help="resume a run from a checkpoint")
    p_res.add_argument("config")
    p_res.add_argument("checkpoint")
    p_res.add_argument("--output-dir", default=None)
    p_res.set_defaults(func=cmd_resume)

    p_val = sub.add_parser("validate-config", help="parse and validate a config file")
    p_val.add_argument("config")
    p_val.set_defaults(func=cmd_validate)

    p_an = sub.add_parser("analyze", help="recompute a report from a stored CSV")
    p_an.add_argument("csv")
    p_an.add_argument("experiment", choices=EXPERIMENTS)
    p_an.add_argument("--out", required=True)
    p_an.add_argument("--t0", type=float, default=1.0)
    p_an.add_argument("--t1", type=float, default=1e30)
    p_an.add_argument("--n-list", default=None)
    p_an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
