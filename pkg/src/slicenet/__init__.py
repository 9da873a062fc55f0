"""Brain-age regression from 2D slice sets, with a small numpy autodiff engine.

Subpackages and modules:

- ``slicenet.autodiff`` - tensors, layer kernels, Adam, gradient checking
- ``slicenet.aggregation`` - mean / max / attention pooling over slice encodings
- ``slicenet.models`` - slice-set networks and the slice-RNN and 3D-CNN baselines
- ``slicenet.data`` - RVOL volumes, slicing, missing-slice simulation, synthetic data
- ``slicenet.training`` - training loop and MAE evaluation
- ``slicenet.cli`` - the ``slicenet`` command
"""

__version__ = "0.1.0"
