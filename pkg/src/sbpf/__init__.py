"""Userspace BPF virtual machine with a verified shared-memory fast path.

The package splits into three layers:

* program handling: ``isa`` (encoding), ``verifier`` (static checks),
  ``vm`` (interpreter and helper dispatch), ``integrity`` (signed
  container format);
* the shared-memory substrate: ``shmem`` (segment layout and lifetime),
  ``ring`` (single-producer single-consumer queue), ``pss`` (shared
  perceptron prediction service);
* the privileged-service boundary: ``service`` (the kernel-role process),
  ``transport`` (client channel, copy-based and shared-memory call
  paths), ``bench``/``report``/``cli`` (measurement and tooling).
"""

from .errors import SbpfError

__all__ = ["SbpfError"]
__version__ = "0.1.0"
