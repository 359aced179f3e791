"""chromaflow: video colorization with self-regularization and diversity.

Subpackages and modules:

* :mod:`chromaflow.imagecore` - images, clips, PNG I/O, colour metrics
* :mod:`chromaflow.flow` - .flo files, backward warping, occlusion, Horn-Schunck
* :mod:`chromaflow.bilateral` - KNN graphs in bilateral space and their loss
* :mod:`chromaflow.neural` - autodiff, networks, Adam, weight files
* :mod:`chromaflow.losses` - temporal, confidence and diversity objectives
* :mod:`chromaflow.synthdata` - procedural clips with exact flow
* :mod:`chromaflow.pipeline` - training phases and video inference
* :mod:`chromaflow.evalkit` - PSNR, warp error, feature distance reports
* :mod:`chromaflow.cli` - the ``chromaflow`` command
"""

__version__ = "0.1.0"

from .errors import ChromaflowError, ConfigError, FormatError, NumericError  # noqa: E402

__all__ = ["ChromaflowError", "ConfigError", "FormatError", "NumericError", "__version__"]
