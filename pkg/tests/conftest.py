import numpy as np
import pytest

from gwnet import glyphs as G


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pack():
    """Compact corpus used across model-level tests: 3 train styles,
    1 holdout, 3 prototype fonts, 8 contents, 32x32."""
    return G.make_toy_pack(7, 3, 8, size=32)


def tiny_model_config(**overrides):
    from gwnet.wnet import MixerConfig, ModelConfig

    kwargs = dict(
        size=32,
        M=3,
        n_styles=3,
        widths=(8, 8, 16, 16, 16),
        mixer=MixerConfig(variant="bn", block_kind="residual",
                          blocks_per_layer=2, deep_boundary=4),
        dtype="float64",
    )
    mixer_keys = {"variant", "block_kind", "blocks_per_layer", "deep_boundary"}
    mix_over = {k: v for k, v in overrides.items() if k in mixer_keys}
    if mix_over:
        base = kwargs["mixer"]
        kwargs["mixer"] = MixerConfig(
            variant=mix_over.get("variant", base.variant),
            block_kind=mix_over.get("block_kind", base.block_kind),
            blocks_per_layer=mix_over.get("blocks_per_layer",
                                          base.blocks_per_layer),
            deep_boundary=mix_over.get("deep_boundary", base.deep_boundary))
    for k, v in overrides.items():
        if k not in mixer_keys:
            kwargs[k] = v
    return ModelConfig(**kwargs)
