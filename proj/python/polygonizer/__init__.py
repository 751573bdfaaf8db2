"""Building footprint polygonizer: image to vertex-sequence polygons."""

import json

from ._core import (
    Model,
    PolygonizerError,
    __version__,
    c_iou,
    decode_tokens,
    encode_polygon,
    generate_dataset,
    iou,
    max_tangent_angle_error,
    rasterize,
    run_cli,
)


def model_config(model):
    """Effective ModelConfig of a loaded model as a dict."""
    return json.loads(model.config_json)


def desk_model(seed=0, **overrides):
    """Randomly initialized desk-scale model; keyword overrides patch the config."""
    config = json.loads(Model.desk(seed).config_json)
    config.update(overrides, seed=seed)
    return Model.from_config_json(json.dumps(config))


__all__ = [
    "Model",
    "PolygonizerError",
    "__version__",
    "c_iou",
    "decode_tokens",
    "desk_model",
    "encode_polygon",
    "generate_dataset",
    "iou",
    "max_tangent_angle_error",
    "model_config",
    "rasterize",
    "run_cli",
]
