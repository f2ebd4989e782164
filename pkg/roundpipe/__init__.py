"""roundpipe

Plan, simulate and check round-robin pipeline schedules for training large models on GPUs that keep their weights in
host memory. roundpipe computes asymmetric stage partitions, synthesizes RoundPipe and baseline schedules, simulates
their timelines and bubble ratios, packs parameter transfers into compute windows and verifies the consistency
protocol of the asynchronous optimizer.

"""

import importlib.metadata

try:
    __version__ = importlib.metadata.version("roundpipe")
except importlib.metadata.PackageNotFoundError:
    # running from a source checkout
    __version__ = "0.0.0"
