"""Latent variable models for longitudinal data with structured missingness.

The package implements two model families on top of GP-prior variational
autoencoders: LLSM, which adds an explicit latent channel for the
missingness mask, and LLPPSM, which additionally models observation
timestamps with a variational GP temporal point process whose intensity
feeds back into the latent kernels.
"""

import os

import jax

# All model math runs in float64; checkpoints are float64 by contract.
jax.config.update("jax_enable_x64", True)

_threads = os.environ.get("LONGILVM_THREADS")
if _threads and "XLA_FLAGS" not in os.environ:
    os.environ["XLA_FLAGS"] = (
        f"--xla_cpu_multi_thread_eigen={'false' if _threads == '1' else 'true'} "
        f"intra_op_parallelism_threads={_threads}"
    )

__version__ = "0.1.0"
