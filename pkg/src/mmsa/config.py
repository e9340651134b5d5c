"""Run configuration: plain-text ``key = value`` lines with dotted keys.

Unknown keys are rejected with the list of valid ones.  Values are typed by
the default they override.  ``none`` is accepted for optional numbers.
"""
from __future__ import annotations

import hashlib

DEFAULTS = {
    "env.name": "coordination",
    "env.episode_limit": 50,
    "agent.hidden": 64,
    "sale.enabled": True,
    "sale.normalizer": "avgl1",
    "sale.z_dim": 16,
    "sale.action_embed": 4,
    "wm.enabled": True,
    "wm.rollout_horizon": 3,
    "wm.kl_balance": True,
    "wm.kl_balance_alpha": 0.8,
    "wm.latent_dim": 16,
    "mixer.embed_dim": 32,
    "mixer.hypernet_embed": 64,
    "mixer.use_global_state": True,
    "mixer.use_rollout": True,
    "train.variant": "full",
    "train.seed": 1,
    "train.total_steps": 20000,
    "train.batch_size": 32,
    "train.buffer_size": 5000,
    "train.lr": 0.001,
    "train.gamma": 0.99,
    "train.target_update_interval": 200,
    "train.test_interval": 10000,
    "train.test_episodes": 32,
    "train.grad_clip": 10.0,
    "train.checkpoint_interval": 0,
    "train.stop_return": None,
    "explore.start": 1.0,
    "explore.finish": 0.05,
    "explore.anneal_steps": 50000,
    "optim.alpha": 0.99,
    "optim.eps": 1e-5,
}

# value type for keys whose default is None
_OPTIONAL_TYPES = {"train.stop_return": float}

VARIANTS = ("full", "no_wm", "no_sale", "no_klb", "no_gs")
_VARIANT_KEYS = {
    "no_wm": ("wm.enabled", False),
    "no_sale": ("sale.enabled", False),
    "no_klb": ("wm.kl_balance", False),
    "no_gs": ("mixer.use_global_state", False),
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw):
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text.lower() == "none":
        if default is None:
            return None
        raise ConfigError(f"{key} cannot be none")
    kind = _OPTIONAL_TYPES.get(key, type(default))
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


class Config:
    def __init__(self, values=None):
        self._values = dict(DEFAULTS)
        self.overrides: dict = {}
        for k, v in (values or {}).items():
            self.set(k, v)

    def _check(self, key):
        if key not in DEFAULTS:
            valid = ", ".join(sorted(DEFAULTS))
            raise ConfigError(f"unknown config key {key!r}; valid keys: {valid}")

    def __getitem__(self, key):
        self._check(key)
        return self._values[key]

    def set(self, key: str, value) -> "Config":
        self._check(key)
        v = _parse_value(key, value)
        self._values[key] = v
        if v != DEFAULTS[key]:
            self.overrides[key] = v
        else:
            self.overrides.pop(key, None)
        return self

    def copy(self) -> "Config":
        return Config({k: v for k, v in self._values.items()})

    def as_dict(self) -> dict:
        return dict(self._values)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self._values.items())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    @classmethod
    def from_text(cls, text: str) -> "Config":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def apply_overrides(self, pairs) -> "Config":
        """``["key=value", ...]`` as given on the command line."""
        for item in pairs or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            self.set(k.strip(), v)
        return self


def make_ablation(cfg: Config, variant: str) -> Config:
    """Copy of ``cfg`` with the single switch for ``variant`` turned off."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    out = cfg.copy()
    for key, _ in _VARIANT_KEYS.values():
        out.set(key, DEFAULTS[key])
    if variant != "full":
        key, value = _VARIANT_KEYS[variant]
        out.set(key, value)
    out.set("train.variant", variant)
    return out


def ablation_flags(cfg: Config) -> dict:
    return {name: cfg[key] != DEFAULTS[key] for name, (key, _) in _VARIANT_KEYS.items()}
