"""Generator sizes for the four ablation designs and for a range of ranks.
No training; runs in well under a second.

    python3 demos/parameter_budget.py [config.yaml]
"""
import dataclasses
import sys

from hyperadapt import count_parameters
from hyperadapt.adapters import build_registry
from hyperadapt.experiment import ablation_adapters, load_config


def main(path="configs/default.yaml"):
    config = load_config(path)
    print(f"backbone: {config.backbone}")
    print(f"\n{'design':32}{'generator':>12}{'generated':>12}{'dense offsets':>15}")
    for name, adapter in ablation_adapters(config):
        c = count_parameters(build_registry(config.backbone, adapter.depth), adapter, config.embedder.dim)
        print(f"{name:32}{c.generator_params:>12}{c.generated:>12}{c.dense_equivalent:>15}")

    registry = build_registry(config.backbone, config.adapter.depth)
    max_rank = min(min(e.out_dim, e.in_dim) for e in registry if e.adapt)
    print(f"\n{'rank':>4}{'generator':>12}{'generated':>12}")
    for k in range(1, max_rank + 1):
        c = count_parameters(registry, dataclasses.replace(config.adapter, rank=k), config.embedder.dim)
        print(f"{k:>4}{c.generator_params:>12}{c.generated:>12}")


if __name__ == "__main__":
    main(*sys.argv[1:])
