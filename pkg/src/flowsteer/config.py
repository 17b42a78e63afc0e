"""Flat key=value configuration with a typed key registry.

Config files are plain text, one `key = value` per line, `#` comments.
Unknown keys are rejected by name; CLI `--set key=value` flags override
file values. `render_reference()` generates the documented key reference.
"""
from __future__ import annotations

from dataclasses import dataclass

from .flows import NoiseSchedule, normalize_schedule
from .grpo import GrpoConfig
from .nets import NetConfig
from .rewards import RewardConfig


@dataclass(frozen=True)
class ConfigKey:
    name: str
    type: str            # int | float | str | bool
    default: object
    help: str


CONFIG_KEYS = [
    ConfigKey("seed", "int", 7, "base seed; every stage derives its streams from it"),
    ConfigKey("run_root", "str", "runs", "parent directory for run outputs"),
    # data
    ConfigKey("data.count", "int", 200, "number of clips in the generated dataset"),
    ConfigKey("data.m_steps", "int", 15, "motion steps M; a clip has M+1 frames"),
    ConfigKey("data.side", "int", 16, "frame grid side length"),
    # dynamics
    ConfigKey("schedule", "str", "1000,755,522,0", "raw denoising timesteps, descending"),
    ConfigKey("sigma", "float", 0.4, "noise scale of the stochastic denoising step"),
    # network
    ConfigKey("net.width", "int", 48, "token embedding width"),
    ConfigKey("net.layers", "int", 2, "transformer blocks"),
    ConfigKey("net.hidden", "int", 96, "MLP hidden width"),
    ConfigKey("net.time_dim", "int", 8, "sinusoidal time-embedding size"),
    ConfigKey("net.cache_frames", "int", 7, "KV cache capacity in frames"),
    # teacher
    ConfigKey("teacher.steps", "int", 3500, "teacher optimizer steps"),
    ConfigKey("teacher.batch", "int", 8, "clips per teacher step"),
    ConfigKey("teacher.lr", "float", 3e-4, "teacher learning rate"),
    ConfigKey("teacher.weight_decay", "float", 0.01, "teacher AdamW weight decay"),
    ConfigKey("teacher.sample_steps", "int", 32, "Euler steps for teacher sampling"),
    # distillation
    ConfigKey("distill.mode", "str", "self-rollout", "self-rollout | teacher-forcing"),
    ConfigKey("distill.objective", "str", "endpoint", "endpoint | dmd"),
    ConfigKey("distill.steps", "int", 1200, "distillation optimizer steps"),
    ConfigKey("distill.batch", "int", 4, "videos per distillation step"),
    ConfigKey("distill.lr", "float", 1e-4, "student learning rate"),
    ConfigKey("distill.weight_decay", "float", 0.01, "student AdamW weight decay"),
    ConfigKey("distill.fake_lr", "float", 3e-4, "fake score net learning rate"),
    ConfigKey("distill.fake_update_ratio", "int", 2, "fake-net steps per student step"),
    ConfigKey("distill.dmd_t_lo", "float", 0.1, "lower bound of the DMD re-noise time"),
    ConfigKey("distill.dmd_t_hi", "float", 0.9, "upper bound of the DMD re-noise time"),
    # policy optimization
    ConfigKey("grpo.group_size", "int", 8, "rollouts per control set"),
    ConfigKey("grpo.clip_eps", "float", 0.2, "importance-ratio clip width"),
    ConfigKey("grpo.kl_beta", "float", 0.0, "KL weight toward the reference policy"),
    ConfigKey("grpo.sigma", "float", 0.4, "stochastic-step noise scale during rollouts"),
    ConfigKey("grpo.iterations", "int", 200, "policy optimization iterations"),
    ConfigKey("grpo.control_sets", "int", 4, "control sets rolled out and averaged per iteration"),
    ConfigKey("grpo.lr", "float", 3e-5, "policy learning rate"),
    ConfigKey("grpo.weight_decay", "float", 0.0, "policy AdamW weight decay"),
    # rewards
    ConfigKey("reward.alpha", "float", 0.05, "motion-reward offset (squared distance)"),
    ConfigKey("reward.lam", "float", 40.0, "motion-reward scaling"),
    ConfigKey("reward.quality_weight", "float", 1.0, "weight of the quality term"),
    ConfigKey("reward.tracker_floor", "float", 0.5, "minimum mass for trackability"),
    ConfigKey("reward.model", "str", "composite", "reward registry entry to optimize"),
    # evaluation
    ConfigKey("eval.seed", "int", 1234, "seed for evaluation rollouts"),
    ConfigKey("eval.max_clips", "int", 0, "cap on evaluated clips (0 = all)"),
    ConfigKey("bench.runs", "int", 20, "latency benchmark measured runs"),
    ConfigKey("bench.warmup", "int", 3, "latency benchmark warm-up runs (excluded)"),
    # serving
    ConfigKey("service.host", "str", "127.0.0.1", "bind address for the session server"),
    ConfigKey("service.port", "int", 8642, "bind port for the session server"),
    ConfigKey("service.checkpoint_dir", "str", "", "directory of .ckpt files to serve"),
    ConfigKey("service.studio_dir", "str", "", "optional static dir served at / (the studio build)"),
]

_BY_NAME = {k.name: k for k in CONFIG_KEYS}


class ConfigError(ValueError):
    pass


def _parse_value(key: ConfigKey, raw: str):
    raw = raw.strip()
    try:
        if key.type == "int":
            return int(raw)
        if key.type == "float":
            return float(raw)
        if key.type == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as err:
        raise ConfigError(f"bad value for {key.name!r} (expected {key.type}): {raw!r}") from err


class Config:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, values: dict):
        self._values = values

    def __getitem__(self, name: str):
        if name not in _BY_NAME:
            raise ConfigError(f"unknown config key {name!r}")
        return self._values[name]

    def items(self):
        return self._values.items()

    def render(self) -> str:
        lines = [f"{name} = {value}" for name, value in sorted(self._values.items())]
        return "\n".join(lines) + "\n"


def _assign(values: dict, name: str, raw: str, origin: str) -> None:
    if name not in _BY_NAME:
        raise ConfigError(f"unknown config key {name!r} ({origin})")
    values[name] = _parse_value(_BY_NAME[name], raw)


def load_config(path: str | None = None, overrides: list[str] | None = None) -> Config:
    values = {k.name: k.default for k in CONFIG_KEYS}
    if path:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                name, raw = line.split("=", 1)
                _assign(values, name.strip(), raw, f"{path}:{lineno}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        name, raw = item.split("=", 1)
        _assign(values, name.strip(), raw, "command line")
    return Config(values)


def render_reference() -> str:
    """Markdown reference, one row per typed key."""
    lines = [
        "# Configuration reference",
        "",
        "Flat `key = value` text files; `#` starts a comment. Command-line",
        "`--set key=value` flags override file values. Unknown keys are",
        "rejected by name.",
        "",
        "| Key | Type | Default | Description |",
        "| --- | --- | --- | --- |",
    ]
    for k in CONFIG_KEYS:
        lines.append(f"| `{k.name}` | {k.type} | `{k.default}` | {k.help} |")
    return "\n".join(lines) + "\n"


# Typed views -----------------------------------------------------------------

def net_config(cfg: Config, mask_mode: str = "bidirectional") -> NetConfig:
    return NetConfig(side=cfg["data.side"], width=cfg["net.width"],
                     layers=cfg["net.layers"], hidden=cfg["net.hidden"],
                     time_dim=cfg["net.time_dim"], mask_mode=mask_mode,
                     cache_frames=cfg["net.cache_frames"])


def schedule(cfg: Config) -> NoiseSchedule:
    raw = [float(s) for s in cfg["schedule"].split(",")]
    return normalize_schedule(raw)


def reward_config(cfg: Config) -> RewardConfig:
    return RewardConfig(alpha=cfg["reward.alpha"], lam=cfg["reward.lam"],
                        quality_weight=cfg["reward.quality_weight"],
                        tracker_floor=cfg["reward.tracker_floor"])


def grpo_config(cfg: Config) -> GrpoConfig:
    return GrpoConfig(group_size=cfg["grpo.group_size"], clip_eps=cfg["grpo.clip_eps"],
                      kl_beta=cfg["grpo.kl_beta"], sigma=cfg["grpo.sigma"],
                      iterations=cfg["grpo.iterations"], lr=cfg["grpo.lr"],
                      weight_decay=cfg["grpo.weight_decay"],
                      control_sets=cfg["grpo.control_sets"])
