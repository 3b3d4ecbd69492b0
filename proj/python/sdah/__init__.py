"""Python bindings for the SDAH-UNet C++ core."""

import json

from . import _core
from ._core import DataError, GraphError, NumericalError, ShapeError, dsc, hd95, paired_t_test, selfcheck, synth

__all__ = [
    "DataError",
    "GraphError",
    "Model",
    "NumericalError",
    "ShapeError",
    "count_flops",
    "default_config",
    "dsc",
    "hd95",
    "lr_at",
    "paired_t_test",
    "selfcheck",
    "synth",
]


def default_config():
    """Default run configuration as a dict with "model", "train" and "sliding" sections."""
    return json.loads(_core.default_config_json())


def _section(cfg, name):
    # Unspecified training fields fall back to the desk schedule, not the bare struct defaults.
    full = default_config()[name]
    full.update(cfg or {})
    return json.dumps(full)


def lr_at(step, train=None):
    return _core.lr_at(step, _section(train, "train"))


def count_flops(model=None, height=32, width=32):
    return _core.count_flops(json.dumps(model or {}), height, width)


class Model:
    """Float32 model. `config` is a dict of model fields overriding the defaults."""

    def __init__(self, config=None, _impl=None):
        self._m = _impl if _impl is not None else _core.Model(json.dumps(config or {}))

    @classmethod
    def load(cls, path):
        return cls(_impl=_core.Model.load(str(path)))

    def save(self, path, train=None):
        self._m.save(str(path), _section(train, "train"))

    @property
    def config(self):
        return json.loads(self._m.config_json)

    @property
    def num_params(self):
        return self._m.num_params

    @property
    def step(self):
        return self._m.step

    def param_names(self):
        return self._m.param_names()

    def param(self, name):
        return self._m.param(name)

    def predict_logits(self, image):
        return self._m.predict_logits(image)

    def predict(self, image, crop=0, step=0):
        """Sliding-window probabilities [K x H x W] and the argmax label map."""
        return self._m.predict(image, crop, step)

    def train(self, images, labels, train=None):
        """Runs until train["max_steps"]; returns the loss of each new step."""
        return self._m.train(list(images), list(labels), _section(train, "train"))

    def explain(self, out, image, case_name="case", target_class=1, stride=1):
        return self._m.explain(str(out), image, case_name, target_class, stride)
