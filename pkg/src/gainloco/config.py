"""Run configuration: presets, the key-value config file format and CLI
overrides. The effective configuration is echoed verbatim into every run
manifest so a run directory is self-describing.

File format: INI-style sections with key = value pairs, e.g.

    [run]
    variant = full
    preset = desk
    seed = 3

    [train]
    iterations = 500

    [env]
    terrains = level,rough
    cmd_vx = -0.5,1.0

Unknown sections or keys are rejected by name.
"""

import configparser
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from . import __version__
from .env import EnvConfig
from .estimators import EstimatorConfig
from .policy import PRESET_WIDTHS, VARIANTS
from .ppo import TrainConfig
from .terrain import TerrainKind


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    variant: str = "full"
    preset: str = "desk"
    seed: int = 0
    out_dir: str = "runs/latest"
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    env: EnvConfig = dc_field(default_factory=EnvConfig)
    estimator: EstimatorConfig = dc_field(default_factory=EstimatorConfig)


# preset-dependent defaults beyond network widths (widths resolve in the
# trainer from policy.PRESET_WIDTHS)
PRESET_DEFAULTS = {
    "paper": {
        "train.n_envs": "256",
        "train.n_steps": "24",
        "env.cmd_vx": "-1.0,2.0",
        "env.cmd_vy": "-0.5,0.5",
        "env.cmd_wz": "-1.0,1.0",
    },
    "desk": {
        "train.n_envs": "64",
        "train.n_steps": "48",
        # at desk-scale batch sizes the full-scale entropy bonus overwhelms
        # the policy gradient so exploration noise never anneals, and the
        # full-scale learning rate drives oversized updates (clip fraction
        # above 0.5) absent an adaptive schedule
        "train.entropy_coef": "0.001",
        "train.lr": "5e-4",
        "env.cmd_vx": "-0.5,1.0",
        "env.cmd_vy": "-0.3,0.3",
        "env.cmd_wz": "-0.6,0.6",
    },
}


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_pair(s: str) -> tuple[float, float]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected 'lo,hi', got {s!r}")
    lo, hi = float(parts[0]), float(parts[1])
    if hi < lo:
        raise ConfigError(f"range {s!r} has hi < lo")
    return lo, hi


def _parse_terrains(s: str) -> tuple[TerrainKind, ...]:
    kinds = tuple(TerrainKind.from_name(name) for name in s.split(",") if name.strip())
    if not kinds:
        raise ConfigError("terrains list is empty")
    return kinds


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, TerrainKind):
        return value.name.lower()
    return repr(value) if isinstance(value, float) else str(value)


# key registry: "section.key" -> (setter(cfg, raw), getter(cfg))
def _run_field(name, parse):
    return (lambda cfg, raw: setattr(cfg, name, parse(raw)),
            lambda cfg: _fmt(getattr(cfg, name)))


def _sub_field(sub, name, parse):
    return (lambda cfg, raw: setattr(getattr(cfg, sub), name, parse(raw)),
            lambda cfg: _fmt(getattr(getattr(cfg, sub), name)))


def _sim_field(name, parse):
    return (lambda cfg, raw: setattr(cfg.env.sim, name, parse(raw)),
            lambda cfg: _fmt(getattr(cfg.env.sim, name)))


def _parse_variant(raw: str) -> str:
    v = raw.strip().lower()
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {raw!r}; expected one of {VARIANTS}")
    return v


def _parse_preset(raw: str) -> str:
    p = raw.strip().lower()
    if p not in PRESET_WIDTHS:
        raise ConfigError(f"unknown preset {raw!r}; expected one of {tuple(PRESET_WIDTHS)}")
    return p


KEYS: dict[str, tuple] = {
    "run.variant": _run_field("variant", _parse_variant),
    "run.preset": _run_field("preset", _parse_preset),
    "run.seed": _run_field("seed", int),
    "run.out_dir": _run_field("out_dir", str),
    "train.lr": _sub_field("train", "lr", float),
    "train.clip": _sub_field("train", "clip", float),
    "train.gamma": _sub_field("train", "gamma", float),
    "train.lam": _sub_field("train", "lam", float),
    "train.entropy_coef": _sub_field("train", "entropy_coef", float),
    "train.value_coef": _sub_field("train", "value_coef", float),
    "train.epochs": _sub_field("train", "epochs", int),
    "train.minibatches": _sub_field("train", "minibatches", int),
    "train.n_envs": _sub_field("train", "n_envs", int),
    "train.n_steps": _sub_field("train", "n_steps", int),
    "train.iterations": _sub_field("train", "iterations", int),
    "train.checkpoint_every": _sub_field("train", "checkpoint_every", int),
    "train.max_grad_norm": _sub_field("train", "max_grad_norm", float),
    "train.obs_mode": _sub_field("train", "obs_mode", str),
    "train.strict_deterministic": _sub_field("train", "strict_deterministic", _parse_bool),
    "env.terrains": _sub_field("env", "terrain_kinds", _parse_terrains),
    "env.physics_dt": _sub_field("env", "physics_dt", float),
    "env.control_decimation": _sub_field("env", "control_decimation", int),
    "env.terrain_extent": _sub_field("env", "terrain_extent", float),
    "env.terrain_cell": _sub_field("env", "terrain_cell", float),
    "env.slope_range": _sub_field("env", "slope_range", _parse_pair),
    "env.stair_rise_range": _sub_field("env", "stair_rise_range", _parse_pair),
    "env.stair_run_range": _sub_field("env", "stair_run_range", _parse_pair),
    "env.rough_amplitude_range": _sub_field("env", "rough_amplitude_range", _parse_pair),
    "env.cmd_vx": _sub_field("env", "cmd_vx_range", _parse_pair),
    "env.cmd_vy": _sub_field("env", "cmd_vy_range", _parse_pair),
    "env.cmd_wz": _sub_field("env", "cmd_wz_range", _parse_pair),
    "env.qd_obs_scale": _sub_field("env", "qd_obs_scale", float),
    "env.yaw_rate_obs_scale": _sub_field("env", "yaw_rate_obs_scale", float),
    "env.h_des": _sub_field("env", "h_des", float),
    "env.foot_clearance_des": _sub_field("env", "foot_clearance_des", float),
    "env.max_steps": _sub_field("env", "max_steps", int),
    "env.min_body_height": _sub_field("env", "min_body_height", float),
    "env.orientation_limit": _sub_field("env", "orientation_limit", float),
    "env.history_length": _sub_field("env", "history_length", int),
    "env.scan_spacing": _sub_field("env", "scan_spacing", float),
    "env.friction_randomization": _sub_field("env", "friction_randomization", _parse_bool),
    "env.friction_range": _sub_field("env", "friction_range", _parse_pair),
    "sim.mass": _sim_field("mass", float),
    "sim.gravity": _sim_field("gravity", float),
    "sim.reflected_inertia": _sim_field("reflected_inertia", float),
    "sim.contact_stiffness": _sim_field("contact_stiffness", float),
    "sim.contact_damping": _sim_field("contact_damping", float),
    "sim.tangential_damping": _sim_field("tangential_damping", float),
    "sim.friction": _sim_field("friction", float),
    "sim.torque_limit": _sim_field("torque_limit", float),
    "sim.p_floor": _sim_field("p_floor", float),
    "estimator.latent_dim": _sub_field("estimator", "latent_dim", int),
    "estimator.beta": _sub_field("estimator", "beta", float),
}


def _apply_key(cfg: RunConfig, key: str, raw: str) -> None:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    setter, _ = KEYS[key]
    try:
        setter(cfg, raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse the config file into an ordered {section.key: raw value} dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    items: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            items[f"{section}.{key}"] = value
    return items


def build_run_config(file_items: dict[str, str] | None = None,
                     overrides: list[str] | None = None) -> RunConfig:
    """Defaults <- preset <- config file <- --set overrides, in that order."""
    file_items = dict(file_items or {})
    parsed_overrides: dict[str, str] = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        parsed_overrides[key.strip()] = value.strip()

    preset_raw = parsed_overrides.get("run.preset", file_items.get("run.preset", "desk"))
    preset = _parse_preset(preset_raw)

    cfg = RunConfig(preset=preset)
    for key, raw in PRESET_DEFAULTS[preset].items():
        _apply_key(cfg, key, raw)
    for key, raw in file_items.items():
        _apply_key(cfg, key, raw)
    for key, raw in parsed_overrides.items():
        _apply_key(cfg, key, raw)
    # re-validate cross-field invariants the setters can't see
    cfg.train.__post_init__()
    return cfg


def effective_items(cfg: RunConfig) -> dict[str, str]:
    return {key: getter(cfg) for key, (_, getter) in KEYS.items()}


def write_manifest(cfg: RunConfig, run_dir: str | Path, extra: dict[str, str] | None = None) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"gainloco_version {__version__}"]
    for key, value in (extra or {}).items():
        lines.append(f"{key} {value}")
    section = None
    for key, value in effective_items(cfg).items():
        sec = key.split(".", 1)[0]
        if sec != section:
            lines.append(f"[{sec}]")
            section = sec
        lines.append(f"{key.split('.', 1)[1]} = {value}")
    path = run_dir / "run_manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path
