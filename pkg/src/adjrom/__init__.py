"""Quadratic reduced-order models from snapshot data.

Subpackages cover full-order snapshot generation (`fom`), POD basis
construction (`pod`), the quadratic model and its integrator (`rom`),
derivative-regression operator inference (`opinf`), adjoint-based trajectory
fitting (`adjoint`), and the perturbation-study harness and CLI (`harness`,
`cli`).
"""

from adjrom import adjoint, fom, harness, io, opinf, pod, rom

__all__ = ["adjoint", "fom", "harness", "io", "opinf", "pod", "rom"]
__version__ = "0.1.0"
