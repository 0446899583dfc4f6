"""Flat `key = value` run configuration with documented defaults."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidConfig
from .imgproc import QcThresholds
from .model import Hyper, ModelConfig
from .pipeline import PreprocessParams


@dataclass(frozen=True)
class RunConfig:
    seed: int = 12345
    count_normal: int = 150
    count_controlled: int = 140
    count_high: int = 155
    folds: int = 5
    bootstrap_b: int = 1000
    mrfo_pop: int = 12
    mrfo_iters: int = 15
    mrfo_lambda_red: float = 0.01
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    hyper: Hyper = field(default_factory=Hyper)
    saliency_alpha: float = 0.45

    @property
    def counts(self):
        return (self.count_normal, self.count_controlled, self.count_high)


_INT_KEYS = {
    "seed", "count_normal", "count_controlled", "count_high", "folds",
    "bootstrap_b", "mrfo_pop", "mrfo_iters", "input_size", "embed_dim",
    "fusion_dim", "fusion_layers", "fusion_heads", "batch_size", "epochs",
    "finetune_epochs", "tiles_x", "tiles_y",
}
_FLOAT_KEYS = {
    "mrfo_lambda_red", "lambda_reg", "lr", "p_low", "p_high", "clip_limit",
    "beta", "qc_blur_min", "qc_specular_max", "qc_mean_low", "qc_mean_high",
    "saliency_alpha",
}
_STR_KEYS = {"variant"}
_TUPLE_KEYS = {"scales", "branch_channels"}

_MODEL_KEYS = {"input_size", "embed_dim", "fusion_dim", "fusion_layers",
               "fusion_heads", "lambda_reg", "variant", "branch_channels"}
_HYPER_KEYS = {"lr", "batch_size", "epochs", "finetune_epochs"}
_PRE_KEYS = {"p_low", "p_high", "tiles_x", "tiles_y", "clip_limit", "scales",
             "beta"}
_QC_KEYS = {"qc_blur_min": "blur_min", "qc_specular_max": "specular_max",
            "qc_mean_low": "mean_low", "qc_mean_high": "mean_high"}


def parse_config(path: str | None) -> RunConfig:
    """Build a RunConfig from a flat key = value file; unknown keys fail."""
    raw: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InvalidConfig(f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                raw[key.strip()] = value.strip()

    values: dict = {}
    for key, text in raw.items():
        if key in _INT_KEYS:
            values[key] = int(text)
        elif key in _FLOAT_KEYS:
            values[key] = float(text)
        elif key in _STR_KEYS:
            values[key] = text
        elif key in _TUPLE_KEYS:
            parts = [p for p in text.replace(",", " ").split() if p]
            values[key] = tuple(int(p) if p.isdigit() else float(p) for p in parts)
        else:
            raise InvalidConfig(f"unknown config key {key!r}")

    try:
        qc = QcThresholds(**{attr: values.pop(k)
                             for k, attr in _QC_KEYS.items() if k in values})
        pre_kwargs = {k: values.pop(k) for k in list(values) if k in _PRE_KEYS}
        preprocess = PreprocessParams(qc=qc, **pre_kwargs)
        model = ModelConfig(**{k: values.pop(k) for k in list(values)
                               if k in _MODEL_KEYS})
        hyper = Hyper(**{k: values.pop(k) for k in list(values) if k in _HYPER_KEYS})
        return RunConfig(preprocess=preprocess, model=model, hyper=hyper, **values)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from exc
