"""Run configuration: dataclasses, named presets and the YAML loader.

A config file is a YAML mapping.  ``preset:`` picks the base, every other
top-level key overrides part of it::

    preset: desk_paddle_bounce
    seed: 3
    ppo: {learning_rate: 5.0e-4}

Unknown keys, wrong types and invalid values raise :class:`ConfigError`
carrying the offending file line.
"""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field, fields, replace

import yaml

from .env import MODES, EnvBatchConfig
from .morphology import BUILTINS, MorphologyError, get_morphology
from .physics import PhysicsConfig
from .ppo import NetworkConfig, PPOHyperparams
from .tasks import TASKS, TaskConfig

HANDS = ("shadow", "shadow_lite", "allegro", "orca")


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: str | None = None, line: int | None = None,
                 source: str | None = None):
        self.field_name, self.line, self.source = field_name, line, source
        where = f"{source or '<config>'}:{line}: " if line is not None else ""
        what = f"field '{field_name}': " if field_name else ""
        super().__init__(f"{where}{what}{message}")


@dataclass(frozen=True)
class SweepConfig:
    n_trials: int = 40
    n_warmup: int = 8
    budget_env_steps: int = 1_000_000
    # per-dimension field overrides, e.g. {"gamma": {"low": 0.9}}
    space: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BenchConfig:
    n_envs: int = 1024
    n_steps: int = 200
    threads: tuple[int, ...] = (1, 2, 4, 8)
    backends: tuple[str, ...] = ("compiled", "python")


@dataclass(frozen=True)
class RunConfig:
    name: str = "custom"
    env: EnvBatchConfig = EnvBatchConfig()
    physics: PhysicsConfig = PhysicsConfig()
    task: TaskConfig = TaskConfig()
    ppo: PPOHyperparams = PPOHyperparams()
    network: NetworkConfig = NetworkConfig()
    total_env_steps: int = 5_000_000
    eval_interval: int = 250_000
    eval_episodes: int = 100
    checkpoint_interval: int = 1_000_000
    target_eval_return: float | None = None
    output_dir: str = "runs/default"
    backend: str | None = None
    threads: int = 1
    sweep: SweepConfig = SweepConfig()
    bench: BenchConfig = BenchConfig()

    @property
    def seed(self) -> int:
        return self.env.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, env=replace(self.env, seed=int(seed)))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def validate(self) -> list[tuple[str, str]]:
        """``(field, message)`` pairs; empty when the config is usable."""
        p: list[tuple[str, str]] = []
        try:
            morph = get_morphology(self.env.morphology)
        except MorphologyError as e:
            p.append(("env.morphology", str(e)))
            morph = None
        if self.env.task not in TASKS:
            p.append(("env.task", f"unknown task {self.env.task!r}; expected one of {list(TASKS)}"))
        if self.task.task != self.env.task:
            p.append(("task.task", f"task section says {self.task.task!r} but env.task is {self.env.task!r}"))
        if self.env.observation_mode not in MODES:
            p.append(("env.observation_mode", f"must be one of {list(MODES)}"))
        if self.env.n_train < 1 or self.env.n_eval < 1 or self.env.stack_k < 1:
            p.append(("env", "n_train, n_eval and stack_k must be >= 1"))
        if morph is not None and self.env.task == "baoding" and morph.palm is None:
            p.append(("env.morphology", f"{morph.name} has no palm and cannot hold Baoding balls"))
        p += [("physics", m) for m in self.physics.validate()]
        p += [("task", m) for m in self.task.validate()]
        p += [("ppo", m) for m in self.ppo.validate(self.env.n_train)]
        if self.total_env_steps < 1 or self.eval_interval < 1 or self.eval_episodes < 1:
            p.append(("total_env_steps", "total_env_steps, eval_interval and eval_episodes must be >= 1"))
        if self.threads < 1:
            p.append(("threads", "must be >= 1"))
        if self.network.activation not in ("elu", "tanh"):
            p.append(("network.activation", "must be 'elu' or 'tanh'"))
        return p


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# -- presets -------------------------------------------------------------------
def _desk_paddle_bounce() -> RunConfig:
    return RunConfig(
        name="desk_paddle_bounce",
        env=EnvBatchConfig(n_train=1024, n_eval=100, morphology="paddle", task="bounce"),
        task=TaskConfig("bounce"),
        ppo=PPOHyperparams(learning_rate=1e-3, gamma=0.99, gae_lambda=0.95, rollout_horizon=16,
                           n_epochs=5, n_minibatches=4, entropy_coef=0.0, kl_target=0.01,
                           reward_scale=0.1),
        network=NetworkConfig(hidden=(64, 64), init_log_std=-1.5),
        total_env_steps=5_000_000, eval_interval=163_840, checkpoint_interval=1_000_000,
        output_dir="runs/desk_paddle_bounce",
        sweep=SweepConfig(budget_env_steps=1_000_000),
    )


def _hand_preset(hand: str, task: str, mode: str, full: bool) -> RunConfig:
    prefix = "full" if full else "desk"
    name = f"{prefix}_{hand}_{task}_{mode}"
    return RunConfig(
        name=name,
        env=EnvBatchConfig(n_train=8092 if full else 1024, n_eval=100, morphology=hand, task=task,
                           observation_mode=mode),
        task=TaskConfig(task),
        ppo=PPOHyperparams(rollout_horizon=16, n_minibatches=4, reward_scale=0.1),
        network=NetworkConfig(hidden=(256, 256)),
        total_env_steps=200_000_000 if full else 5_000_000,
        eval_interval=2_000_000 if full else 250_000,
        checkpoint_interval=10_000_000 if full else 1_000_000,
        output_dir=f"runs/{name}",
    )


def presets() -> dict[str, RunConfig]:
    out = {"desk_paddle_bounce": _desk_paddle_bounce()}
    for hand in HANDS:
        for task in TASKS:
            for mode in MODES:
                for full in (True, False):
                    p = _hand_preset(hand, task, mode, full)
                    out[p.name] = p
    return out


def get_preset(name: str) -> RunConfig:
    table = presets()
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(table))}", "preset")
    return table[name]


# -- YAML loading ----------------------------------------------------------------
def _line(node) -> int:
    return node.start_mark.line + 1


def _convert(node, tp, path: str, src: str):
    """Coerce a YAML node to annotation ``tp``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if isinstance(node, yaml.ScalarNode) and node.tag.endswith(":null"):
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _convert(node, inner[0], path, src)
    if dataclasses.is_dataclass(tp):
        return _dataclass_from_node(node, tp, path, src)
    if origin is tuple or tp is tuple:
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError("expected a list", path, _line(node), src)
        elems = args if args and args[-1] is not Ellipsis else None
        item = args[0] if args else typing.Any
        if elems is not None and len(elems) != len(node.value):
            raise ConfigError(f"expected {len(elems)} entries, got {len(node.value)}", path, _line(node), src)
        return tuple(_convert(v, elems[i] if elems else item, f"{path}[{i}]", src)
                     for i, v in enumerate(node.value))
    if tp is dict or origin is dict:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError("expected a mapping", path, _line(node), src)
        return yaml.safe_load(yaml.serialize(node))
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"expected a scalar of type {getattr(tp, '__name__', tp)}", path, _line(node), src)
    value = yaml.safe_load(yaml.serialize(node))
    try:
        if tp is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if tp is int:
            if isinstance(value, bool) or not isinstance(value, int):
                if isinstance(value, float) and value.is_integer():
                    return int(value)
                raise TypeError
            return value
        if tp is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if tp is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except TypeError:
        raise ConfigError(f"expected {tp.__name__}, got {value!r}", path, _line(node), src) from None
    return value


def _dataclass_from_node(node, cls, path: str, src: str, base=None):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("expected a mapping", path or None, _line(node), src)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kw = {}
    for k_node, v_node in node.value:
        key = k_node.value
        full = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown key (expected one of {sorted(names)})", full, _line(k_node), src)
        kw[key] = _convert(v_node, hints[key], full, src)
    base = base if base is not None else cls()
    return replace(base, **kw)


_FIELD_LINES: dict[str, int] = {}


def _collect_lines(node, path: str, out: dict[str, int]) -> None:
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = f"{path}.{k.value}" if path else str(k.value)
            out[p] = _line(k)
            _collect_lines(v, p, out)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(e, 'problem', e)}", None,
                          mark.line + 1 if mark else None, source) from None
    if root is None:
        root = yaml.compose("{}")
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("top level must be a mapping", None, _line(root), source)
    lines: dict[str, int] = {}
    _collect_lines(root, "", lines)
    base = RunConfig()
    rest = []
    seed = None
    for k, v in root.value:
        if k.value == "preset":
            name = _convert(v, str, "preset", source)
            try:
                base = get_preset(name)
            except ConfigError as e:
                raise ConfigError(str(e.args[0]).split("field 'preset': ")[-1], "preset", _line(v), source) from None
        elif k.value == "seed":
            seed = _convert(v, int, "seed", source)
        else:
            rest.append((k, v))
    sub = yaml.MappingNode(root.tag, rest, root.start_mark, root.end_mark)
    cfg = _dataclass_from_node(sub, RunConfig, "", source, base=base)
    # nested sections merge over the preset rather than replacing it wholesale
    for k, v in rest:
        f = k.value
        if dataclasses.is_dataclass(getattr(base, f, None)):
            merged = _dataclass_from_node(v, type(getattr(base, f)), f, source, base=getattr(base, f))
            cfg = replace(cfg, **{f: merged})
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if "task" not in lines or "task.task" not in lines:
        cfg = replace(cfg, task=replace(cfg.task, task=cfg.env.task))
    problems = cfg.validate()
    if problems:
        fname, msg = problems[0]
        line = lines.get(fname) or lines.get(fname.split(".")[0])
        raise ConfigError(msg, fname, line, source)
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", None, None, os.fspath(path)) from None
    return parse_config(text, os.fspath(path))


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    d.pop("name", None)
    seed = d["env"].pop("seed")
    return yaml.safe_dump({"seed": seed, **d}, sort_keys=False)


__all__ = ["RunConfig", "SweepConfig", "BenchConfig", "ConfigError", "presets", "get_preset",
           "parse_config", "load_config", "dump_config", "BUILTINS"]
