"""Entropy-regularized adversarial training (ATENT) at desk scale.

Everything runs on float64 numpy through a small tape-based autodiff core.
Subpackages of interest:

- tensor:    dense tensors + reverse-mode differentiation
- models:    MLP / small-CNN classifiers and their loss plumbing
- sampler:   Langevin sampling of high-loss neighborhoods (Gibbs chains)
- defenses:  SGD, Entropy-SGD, PGD-AT and ATENT trainers
- attacks:   FGSM / PGD / ATENT-as-attack evaluation adversaries
- smoothing: randomized-smoothing inference
- data:      IDX parsing, synthetic tasks, batching
- oracle:    finite differences, grid Gibbs densities, chain/lemma checks
- cli:       experiment orchestration (`atent train|attack|evaluate|...`)
"""

__version__ = "0.1.0"
