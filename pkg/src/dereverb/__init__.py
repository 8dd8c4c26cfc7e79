"""Time-domain monaural speech dereverberation with temporal conv networks.

Library layout:

* ``autodiff``  - float64 tensors with reverse-mode differentiation
* ``dsp``       - framing, overlap-add, synthetic RIRs/corpora, WAV I/O
* ``model``     - encoder / mask / decoder network (baseline and weighted)
* ``loss``      - SISDR metric and its negative as the training loss
* ``training``  - Adam, plateau schedule, batch loop, checkpoints
* ``analysis``  - attention weights binned by reverberation time
* ``plotting``  - matplotlib figures for the report paths
* ``cli``       - the ``dereverb`` command
"""

from .autodiff import Tensor
from .dsp import AudioClip, ReverbSample, Rir, generate_corpus
from .loss import SisdrResult, sisdr, sisdr_loss
from .model import ModelConfig, WDTCNModel, count_parameters, enhance, forward, init_model
from .training import TrainConfig, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "AudioClip",
    "Rir",
    "ReverbSample",
    "generate_corpus",
    "SisdrResult",
    "sisdr",
    "sisdr_loss",
    "ModelConfig",
    "WDTCNModel",
    "init_model",
    "forward",
    "enhance",
    "count_parameters",
    "TrainConfig",
    "TrainState",
    "train",
    "__version__",
]
