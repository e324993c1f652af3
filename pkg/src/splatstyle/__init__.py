"""Instant zero-shot style transfer for 3D Gaussian-splat scenes.

Pipeline: embed image features into per-Gaussian features (low-dim render
+ affine lift), align their statistics to any style image, and decode back
to per-Gaussian RGB with a KNN-based 3D convolution stack.  Stylized color
lives on the 3D primitives, so rendering stays view-consistent and is
independent of the one-shot transfer step.
"""

__version__ = "0.1.0"

from .scene import (Gaussian, GaussianScene, KnnIndex, build_knn, covariance,
                    load_scene, save_scene)
from .render import (Camera, RenderOutput, SplatProjection, alpha_at,
                     backward_channel, compute_cache, project, render, scale_camera)
from .features import FeatureMap, ToyExtractor, load_feature_map, save_feature_map
from .embed import (AffineLift, EmbedConfig, EmbedResult, embed_train,
                    lift_gaussians, lift_pixel, load_affine, save_affine)
from .style import (SceneFeatureStats, StyleStats, adain_transfer,
                    compute_scene_stats, compute_style_stats, interpolate_styles,
                    load_style_stats, save_style_stats)
from .decoder import (ConvLayer, KnnDecoder, conv_backward, conv_forward_fast,
                      conv_forward_naive, decode, load_decoder, save_decoder)
from .train import (StyleLossConfig, StylizeTrainConfig, TrainResult, content_loss,
                    init_decoder_from, style_loss, train_decoder)
from .metrics import ConsistencyReport, TimingReport, measure_timing, warp_consistency
