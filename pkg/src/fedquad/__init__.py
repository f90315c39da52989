"""Simulated federated LoRA fine-tuning with adaptive depth and activation
quantization scheduling.

The package is organized bottom-up:

* ``rng``       counter-based deterministic random streams
* ``backend``   compiled/pure-Python kernel selection (bit-identical pair)
* ``tensor``    validated matrix primitives
* ``quant``     block-wise int8 activation codec
* ``model``     frozen residual MLP stack + LoRA adapters, manual autodiff
* ``resource``  memory/latency cost model and device profiles
* ``scheduler`` feasible-set enumeration, reward, config selection, baselines
* ``federation``round loop, layer-wise aggregation, global evaluation
* ``workload``  synthetic classification task + non-IID partitioning
* ``experiment``end-to-end runs, policy comparison, cost calibration
* ``cli``       ``fedquad run | compare | calibrate``
"""

from fedquad.backend import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]
