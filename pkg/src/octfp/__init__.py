"""octfp: OCT-style 3D fingerprint volume synthesis and verification.

The package covers a desk-scale, fully reproducible pipeline:

* :mod:`octfp.tensorio` - image/volume types, bit-exact containers, manifests
* :mod:`octfp.masterprint` - procedural binary prints, TPS warps, binarization
* :mod:`octfp.phantom` - layered OCT phantoms with ground-truth geometry
* :mod:`octfp.styletransfer` - exemplar style transfer (AdaIN + contrastive)
* :mod:`octfp.expansion` - 2D-to-3D structure expansion U-Net
* :mod:`octfp.refiner` - 3D GAN realism refinement
* :mod:`octfp.metrics` - SSIM, Frechet distances, ROC/EER/TAR
* :mod:`octfp.pipeline` / :mod:`octfp.cli` - orchestration and the CLI
"""

from .tensorio import (BinaryImage2D, ContainerError, DatasetManifest, Image2D,
                       ManifestEntry, ValidationError, Volume3D,
                       detect_surface, extract_enface_layer,
                       foreground_category, read_image, read_volume,
                       write_image, write_volume, z_mean_projection)

__version__ = "0.1.0"

__all__ = [
    "BinaryImage2D", "ContainerError", "DatasetManifest", "Image2D",
    "ManifestEntry", "ValidationError", "Volume3D", "detect_surface",
    "extract_enface_layer", "foreground_category", "read_image", "read_volume",
    "write_image", "write_volume", "z_mean_projection", "__version__",
]
