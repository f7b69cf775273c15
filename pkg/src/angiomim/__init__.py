"""Anatomy-guided masked image modeling for X-ray angiograms.

Rasters are plain 2-D numpy arrays (float64 images in [0, 1], uint8 masks in
{0, 1}).  The submodules follow the data flow: ``vesselness`` extracts a
Frangi vessel mask, ``segmentor`` learns from it, ``guidance`` fuses both into
a per-patch distribution, ``masking`` samples masked patch sets from it and
``mim`` trains a masked autoencoder with an anatomical consistency term.
"""

from .config import ConfigError, PipelineConfig
from .guidance import (GuidanceMap, PatchDistribution, fuse_guidance, patch_distribution,
                       read_distribution, write_distribution)
from .image import (ImageFormatError, gaussian_second_derivatives, load_image, load_mask,
                    partition, percentile, reassemble, save_image)
from .masking import (MaskSchedule, MaskSet, guidance_intensity, sample_mask,
                      weighted_sample_without_replacement)
from .metrics import cldice, count_components, dsc, skeletonize
from .mim import (LossReport, MAEConfig, MAEModel, TrainConfig, compose_reconstruction,
                  consistency_loss, mae_forward, mim_loss, pretrain_loop, recon_loss)
from .pipeline import STAGES, StageError, run_pipeline
from .segmentor import SegmentorModel, seg_forward, train_segmentor
from .synth import SynthConfig, gen_dataset, gen_tube_image, read_manifest
from .vesselness import (VesselnessParams, adaptive_threshold, eigen2x2, extract_anatomy,
                         frangi_response, multiscale_vesselness, region_grow)

__version__ = "0.1.0"
