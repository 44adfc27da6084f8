"""Few-shot glyph synthesis with a two-encoder mixer network trained under
a gradient-penalty Wasserstein objective."""

from .tensor import Tensor, grad, no_grad
from .functional import (ConvSpec, activation, adain, channel_concat, conv2d,
                         deconv2d, input_gradient, interpolate_uniform,
                         normalize, set_reduce, von_neumann_div)
from .gradcheck import grad_check
from .glyphs import (BatchSampler, GlyphImage, GlyphPack, TrainSample,
                     build_inference_inputs, import_directory, make_toy_pack,
                     sample_batch)
from .wnet import Critic, Generator, MixerConfig, ModelConfig, discriminate
from .percep import TapClassifier, train_classifier
from .losses import LossReport, LossWeights
from .trainer import Classifiers, TrainConfig, TrainState, fit

__version__ = "0.1.0"
