"""Experiment configuration: TOML file -> validated, defaulted dataclasses.

Defaults follow the published SAC + auxiliary-loss hyperparameters ("paper"
preset).  The "desk" preset shrinks rendering and network widths so a run
fits on one CPU; loss definitions are identical under both presets.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import typing
from pathlib import Path
from typing import List, Optional

from replab.augment import AugmentationSpec
from replab.errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

OBJECTIVES = (
    "none",
    "baseline",
    "rollout",
    "contrastive",
    "curl",
    "spr",
    "dbc",
    "value_aware",
    "reconstruction",
)


@dataclasses.dataclass
class EnvSection:
    task: str = "point_mass"
    distractor_mode: str = "none"
    layout: str = "centered"
    render_size: int = 100
    agent_scale: float = 1.0
    action_repeat: int = 4
    frame_stack: int = 3
    frame_dir: Optional[str] = None
    episode_length: Optional[int] = None
    procedural_frames: int = 500


@dataclasses.dataclass
class AgentSection:
    latent_dim: int = 50
    num_layers: int = 4
    num_filters: int = 32
    strides: List[int] = dataclasses.field(default_factory=lambda: [2, 1, 1, 1])
    hidden_dim: int = 1024
    lr: float = 1e-3
    beta1: float = 0.9
    alpha_lr: float = 1e-4
    alpha_beta1: float = 0.5
    init_temperature: float = 0.1
    gamma: float = 0.99
    critic_tau: float = 0.005
    encoder_tau: float = 0.005
    batch_size: int = 128
    buffer_size: int = 100_000
    init_steps: int = 1000
    target_update_freq: int = 2
    actor_update_freq: int = 2
    critic_trains_encoder: bool = True
    precision: str = "float32"


@dataclasses.dataclass
class AuxSection:
    objective: str = "baseline"
    include_transition: bool = True
    include_reward: bool = True
    arrangement: str = "through_transition"
    decoder: str = "nonlinear"
    target: str = "ema"
    horizon: int = 1
    temperature: float = 0.1
    with_reward: bool = False
    mode: str = "full"
    with_baseline: bool = True
    transition_hidden: int = 128
    transition_layers: int = 6
    reward_hidden: int = 512
    reward_layers: int = 3
    projection_dim: int = 64
    lr: Optional[float] = None


@dataclasses.dataclass
class RunSection:
    total_steps: int = 500_000
    eval_every: int = 10_000
    eval_episodes: int = 10
    seed: int = 0
    output_dir: Optional[str] = None
    preset: str = "paper"
    method: Optional[str] = None
    record_wallclock: bool = False


@dataclasses.dataclass
class ExperimentConfig:
    env: EnvSection = dataclasses.field(default_factory=EnvSection)
    agent: AgentSection = dataclasses.field(default_factory=AgentSection)
    aux: AuxSection = dataclasses.field(default_factory=AuxSection)
    augmentation: List[AugmentationSpec] = dataclasses.field(default_factory=list)
    run: RunSection = dataclasses.field(default_factory=RunSection)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["augmentation"] = [a.to_dict() for a in self.augmentation]
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        # where results are written does not change the experiment
        d["run"]["output_dir"] = None
        return _digest(d)

    def model_hash(self) -> str:
        """Hash of everything that determines parameter shapes and losses."""
        d = self.to_dict()
        del d["run"]
        return _digest(d)

    @property
    def method_name(self) -> str:
        if self.run.method:
            return self.run.method
        name = self.aux.objective
        if name == "value_aware":
            name += "_with_reward" if self.aux.with_reward else "_without_reward"
        return name

    def validate(self):
        errors = []
        a, e, x, r = self.agent, self.env, self.aux, self.run
        for section, name, value, ok in [
            ("agent", "batch_size", a.batch_size, a.batch_size >= 1),
            ("agent", "buffer_size", a.buffer_size, a.buffer_size >= 1),
            ("agent", "latent_dim", a.latent_dim, a.latent_dim >= 1),
            ("agent", "init_steps", a.init_steps, a.init_steps >= 0),
            ("agent", "target_update_freq", a.target_update_freq, a.target_update_freq >= 1),
            ("agent", "actor_update_freq", a.actor_update_freq, a.actor_update_freq >= 1),
            ("agent", "gamma", a.gamma, 0.0 <= a.gamma <= 1.0),
            ("agent", "critic_tau", a.critic_tau, 0.0 <= a.critic_tau <= 1.0),
            ("agent", "encoder_tau", a.encoder_tau, 0.0 <= a.encoder_tau <= 1.0),
            ("agent", "lr", a.lr, a.lr >= 0.0),
            ("agent", "precision", a.precision, a.precision in ("float32", "float64")),
            ("agent", "strides", a.strides, len(a.strides) == a.num_layers and all(s >= 1 for s in a.strides)),
            ("env", "action_repeat", e.action_repeat, e.action_repeat >= 1),
            ("env", "render_size", e.render_size, e.render_size >= 16),
            ("aux", "objective", x.objective, x.objective in OBJECTIVES),
            ("aux", "horizon", x.horizon, x.horizon >= 1),
            ("aux", "temperature", x.temperature, x.temperature > 0),
            ("aux", "arrangement", x.arrangement, x.arrangement in ("through_transition", "independent")),
            ("aux", "decoder", x.decoder, x.decoder in ("nonlinear", "linear")),
            ("aux", "target", x.target, x.target in ("ema", "online_sg", "online")),
            ("aux", "mode", x.mode, x.mode in ("full", "partial")),
            ("run", "total_steps", r.total_steps, r.total_steps >= 0),
            ("run", "eval_every", r.eval_every, r.eval_every >= 1),
            ("run", "eval_episodes", r.eval_episodes, r.eval_episodes >= 1),
            ("run", "seed", r.seed, r.seed >= 0),
        ]:
            if not ok:
                errors.append(f"[{section}] {name} = {value!r} is invalid")
        if x.objective == "baseline" and not (x.include_transition or x.include_reward):
            errors.append("[aux] baseline needs include_transition or include_reward")
        if errors:
            raise ConfigError("; ".join(errors))
        return self


def _digest(d) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


PRESETS = {
    "paper": {},
    "desk": {
        "env": {"render_size": 64},
        "agent": {
            "latent_dim": 16,
            "batch_size": 64,
            "buffer_size": 20_000,
            "strides": [2, 2, 2, 1],
            "hidden_dim": 256,
        },
        "run": {"preset": "desk"},
    },
}

SECTIONS = {
    "env": EnvSection,
    "agent": AgentSection,
    "aux": AuxSection,
    "run": RunSection,
}


def _line_of(text, key, section=None):
    """1-based line of ``key = ...`` (inside ``[section]`` when given)."""
    if text is None:
        return None
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        header = re.match(r"\s*\[\[?\s*([A-Za-z_]+)\s*\]\]?", line)
        if header:
            current = header.group(1)
            if section is None and current == key:
                return i
            continue
        if re.match(rf"\s*{re.escape(key)}\s*=", line) and (section is None or current == section):
            return i
    return None


def _where(text, key, section=None):
    line = _line_of(text, key, section)
    return f" (line {line})" if line else ""


def _check_type(section, key, value, annotation, text):
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return value
        annotation = next(a for a in args if a is not type(None))
        origin = typing.get_origin(annotation)
    ok = True
    if annotation is bool:
        ok = isinstance(value, bool)
    elif annotation is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif annotation is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif annotation is str:
        ok = isinstance(value, str)
    elif origin in (list, List):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    if not ok:
        raise ConfigError(
            f"[{section}] {key}{_where(text, key, section)}: expected {getattr(annotation, '__name__', annotation)}, got {value!r}"
        )
    return value


def _build_section(cls, section, values, text):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key '{key}' in [{section}]{_where(text, key, section)}")
        kwargs[key] = _check_type(section, key, value, hints[key], text)
    return cls(**kwargs)


def _merge(base, override):
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def config_from_dict(data, preset=None, text=None) -> ExperimentConfig:
    data = dict(data)
    for key in data:
        if key not in SECTIONS and key != "augmentation":
            raise ConfigError(f"unknown section or key '{key}'{_where(text, key)}")
    preset = preset or data.get("run", {}).get("preset", "paper")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], {k: v for k, v in data.items() if k != "augmentation"})
    merged.setdefault("run", {})["preset"] = preset
    kwargs = {name: _build_section(cls, name, merged.get(name, {}), text) for name, cls in SECTIONS.items()}
    augs = []
    for i, entry in enumerate(data.get("augmentation", [])):
        try:
            augs.append(AugmentationSpec(**entry))
        except TypeError as exc:
            raise ConfigError(f"[[augmentation]] entry {i + 1}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"[[augmentation]] entry {i + 1}: {exc}") from None
    return ExperimentConfig(augmentation=augs, **kwargs).validate()


def load_config(path, preset=None, overrides=None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if overrides:
        data = _merge(data, overrides)
    try:
        return config_from_dict(data, preset, text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    """TOML text that loads back to an equal config."""
    d = cfg.to_dict()
    lines = []
    for section in ("env", "agent", "aux", "run"):
        lines.append(f"[{section}]")
        for k, v in d[section].items():
            if v is not None:
                lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    for aug in d["augmentation"]:
        lines.append("[[augmentation]]")
        for k, v in aug.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(v)
