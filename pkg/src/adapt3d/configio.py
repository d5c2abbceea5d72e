"""Plain-text ``key = value`` configuration handling.

Used both for user config files and for the config snapshot embedded in
checkpoints. Lines are UTF-8, ``#`` starts a comment, unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

from .model import AdaptConfig


class ConfigError(ValueError):
    """Malformed config text or unknown/invalid keys."""


def parse_kv_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(mapping):
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def _to_bool(value):
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _to_layers(value):
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"layers must be four comma-separated counts, got {value!r}")
    return tuple(int(p) for p in parts)


# key -> (owner, field, parser). Owner "model" feeds AdaptConfig, "train"
# feeds TrainConfig; image_extent is inferred from data unless given.
SCHEMA = {
    "image_extent": ("model", "image_extent", int),
    "patch_size": ("model", "patch_size", int),
    "embed_dim": ("model", "embed_dim", int),
    "heads": ("model", "heads", int),
    "layers": ("model", "layers", _to_layers),
    "mlp_ratio": ("model", "mlp_ratio", int),
    "n_total": ("model", "n_total", int),
    "n_min": ("model", "n_min", int),
    "n_max": ("model", "n_max", int),
    "lr": ("train", "lr", float),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "p_update": ("train", "p_update", float),
    "seed": ("train", "seed", int),
    "augment": ("train", "augment", _to_bool),
    "se_radius": ("train", "se_radius", int),
    "weight_decay": ("train", "weight_decay", float),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "adam_eps": ("train", "adam_eps", float),
    "cosine_horizon": ("train", "cosine_horizon", int),
}


def coerce_options(raw, source="<config>"):
    """Validate a raw key->string mapping against the schema."""
    model_kw, train_kw = {}, {}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}")
        owner, fieldname, parse = SCHEMA[key]
        try:
            parsed = parse(value) if isinstance(value, str) else value
        except (ValueError, TypeError) as err:
            raise ConfigError(f"{source}: bad value for {key!r}: {err}") from None
        (model_kw if owner == "model" else train_kw)[fieldname] = parsed
    return model_kw, train_kw


def build_configs(raw, image_extent=None, source="<config>"):
    from .slicer import default_bounds
    from .trainer import TrainConfig

    model_kw, train_kw = coerce_options(raw, source=source)
    if image_extent is not None and "image_extent" not in model_kw:
        model_kw["image_extent"] = image_extent
    if "n_total" in model_kw and "n_min" not in model_kw:
        model_kw["n_min"], model_kw["n_max"] = default_bounds(model_kw["n_total"])
    try:
        model_cfg = AdaptConfig(**model_kw)
        train_cfg = TrainConfig(**train_kw)
    except ValueError as err:
        raise ConfigError(f"{source}: {err}") from None
    return model_cfg, train_cfg


def snapshot_text(model_cfg, train_cfg, epoch):
    """Round-trippable text block for checkpoints (includes progress)."""
    fields = {}
    for key, (owner, fieldname, _) in SCHEMA.items():
        cfg = model_cfg if owner == "model" else train_cfg
        value = getattr(cfg, fieldname)
        if value is None:
            continue
        if key == "layers":
            value = ",".join(str(v) for v in value)
        fields[key] = value
    fields["epoch"] = epoch
    return format_kv(fields)


def parse_snapshot(text):
    raw = parse_kv_text(text, source="<checkpoint>")
    epoch = int(raw.pop("epoch", 0))
    model_cfg, train_cfg = build_configs(raw, source="<checkpoint>")
    return model_cfg, train_cfg, epoch
