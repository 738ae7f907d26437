"""Ultra-low-bitrate mel-spectrogram speech codec.

Three stages: a ConvNeXt v2 encoder/decoder with a single online-clustering
vector-quantizer codebook, a conditional-flow-matching refiner trained with a
self-consistency objective for few-step sampling, and a deterministic
pseudo-inverse-mel / Griffin-Lim reconstruction path.
"""

__version__ = "0.1.0"
