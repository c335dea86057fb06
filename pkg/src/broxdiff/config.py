"""Experiment configuration: flat key = value text with a typed schema.

No hidden defaults: parsing fills every schema key, and the effective
configuration is echoed verbatim into each run manifest.  Serialization
is canonical, so a config round-trips bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ParameterError


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (type tag, default, description)
SCHEMA: dict[str, tuple[str, object, str]] = {
    "master_seed": ("int", 42, "environment seed; Monte Carlo streams derive from it"),
    "grid.M": ("int", 1024, "grid size, power of two"),
    "grid.K": ("int", 341, "retained band, K <= M/3"),
    "noise.K_max": ("int", 512, "highest sampled noise mode"),
    "noise.level": ("int", 256, "working truncation level n"),
    "noise.levels": ("int_list", (16, 32, 64, 128, 256), "sweep levels"),
    "noise.alpha": ("float", 1.45, "regularity parameter in (1, 3/2)"),
    "noise.alpha_cauchy": ("float", 1.25, "regularity for convergence tables; "
                           "decay is visible at desk scale here"),
    "noise.scale": ("float", 1.0, "amplitude factor applied to the environment"),
    "noise.n_seeds": ("int", 50, "seed count for sweep subcommands"),
    "generator.N": ("int_or_auto", "auto", "reference level; auto = estimate"),
    "generator.c_shift": ("float", 1.0, "resolvent shift c > 0"),
    "generator.defect_variant": ("str", "source", "source | value"),
    "generator.n_probes": ("int", 5, "probe remainders for operator checks"),
    "generator.probe_kmax": ("int", 32, "probe bandwidth"),
    "spectral.K_gal": ("int", 96, "Galerkin band of the weighted eigenproblem"),
    "spectral.M_out": ("int", 128, "kernel evaluation grid"),
    "spectral.t_min": ("float", 0.005, "smallest kernel time"),
    "spectral.t_max": ("float", 0.1, "largest kernel time"),
    "spectral.t_count": ("int", 8, "log-spaced kernel times"),
    "spectral.n_eigs_csv": ("int", 10, "eigenvalues written per seed"),
    "mc.dt": ("float_or_auto", "auto", "step; auto = stability rule"),
    "mc.T": ("float", 40.0, "horizon"),
    "mc.n_paths": ("int", 1024, "paths"),
    "mc.burn_in": ("float", 8.0, "occupation burn-in time"),
    "mc.bins": ("int", 64, "wrapped histogram bins"),
    "mc.x0": ("float", 0.0, "start point"),
    "mc.record_every": ("int", 2, "histogram recording stride"),
    "output.dir": ("str", "runs", "artifact root (env BROXDIFF_OUT overrides)"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (_, default, _) in SCHEMA.items()}
        for k, v in self.values.items():
            if k not in SCHEMA:
                raise ParameterError(f"unknown config key {k!r}")
            merged[k] = v
        object.__setattr__(self, "values", merged)
        self.validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        M, K = v["grid.M"], v["grid.K"]
        if M < 4 or (M & (M - 1)) != 0:
            raise ParameterError(f"grid.M: {M} is not a power of two")
        if not (1 <= K <= M // 3):
            raise ParameterError(f"grid.K: {K} violates 1 <= K <= M/3 = {M // 3}")
        if not (1.0 < v["noise.alpha"] < 1.5):
            raise ParameterError(f"noise.alpha: {v['noise.alpha']} outside (1, 3/2)")
        if not (1.0 < v["noise.alpha_cauchy"] < 1.5):
            raise ParameterError(
                f"noise.alpha_cauchy: {v['noise.alpha_cauchy']} outside (1, 3/2)"
            )
        K_max = v["noise.K_max"]
        if v["noise.level"] > K_max:
            raise ParameterError(
                f"noise.level: {v['noise.level']} exceeds noise.K_max = {K_max}"
            )
        for n in v["noise.levels"]:
            if 2 * n > K_max:
                raise ParameterError(
                    f"noise.levels: doubling sweep needs 2*{n} <= noise.K_max = {K_max}"
                )
        if v["generator.c_shift"] <= 0:
            raise ParameterError("generator.c_shift: must be positive")
        if v["generator.defect_variant"] not in ("source", "value"):
            raise ParameterError("generator.defect_variant: must be source or value")
        if 4 * v["spectral.K_gal"] > v["grid.M"]:
            raise ParameterError(
                f"spectral.K_gal: {v['spectral.K_gal']} too large for grid.M = {M}"
            )
        if not (0.0 < v["spectral.t_min"] <= v["spectral.t_max"]):
            raise ParameterError("spectral.t_min/t_max: need 0 < t_min <= t_max")
        if v["mc.dt"] != "auto" and v["mc.dt"] <= 0:
            raise ParameterError("mc.dt: must be positive or auto")

    def t_grid(self):
        lo, hi, n = (
            self.values["spectral.t_min"],
            self.values["spectral.t_max"],
            self.values["spectral.t_count"],
        )
        if n == 1:
            return [lo]
        r = (hi / lo) ** (1.0 / (n - 1))
        return [lo * r**i for i in range(n)]

    def to_text(self) -> str:
        lines = ["# broxdiff experiment configuration"]
        for key in sorted(SCHEMA):
            lines.append(f"{key} = {_fmt(self.values[key])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        raw: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParameterError(f"line {lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in SCHEMA:
                raise ParameterError(f"line {lineno}: unknown config key {key!r}")
            kind = SCHEMA[key][0]
            try:
                if kind == "int":
                    raw[key] = int(val)
                elif kind == "float":
                    raw[key] = float(val)
                elif kind == "int_list":
                    raw[key] = _parse_int_list(val)
                elif kind == "int_or_auto":
                    raw[key] = "auto" if val == "auto" else int(val)
                elif kind == "float_or_auto":
                    raw[key] = "auto" if val == "auto" else float(val)
                else:
                    raw[key] = val
            except ValueError as exc:
                raise ParameterError(f"line {lineno}: {key}: {exc}") from None
        return cls(values=raw)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update(overrides)
        return ExperimentConfig(values=vals)


def schema_table() -> str:
    """Human-readable schema listing for --help and the docs."""
    rows = [f"{k:28s} {t:13s} default={_fmt(d)!s:18s} {desc}"
            for k, (t, d, desc) in sorted(SCHEMA.items())]
    return "\n".join(rows)
