"""Pretrain a small CNN on the synthetic subgroup task, then fit HyperAdapt on
top of the frozen backbone and compare per-group F1.

    python3 demos/quickstart.py
"""
from hyperadapt import AdapterConfig, BackboneSpec, SyntheticConfig, TrainConfig, generate, split
from hyperadapt.training import EmbedderConfig, attach_hyperadapt, evaluate, prepare_task, pretrain_model, train


def main():
    dataset = generate(SyntheticConfig(group_sizes=(1200, 600, 200)), seed=0)
    task = prepare_task(dataset, split(dataset, seed=0))
    spec = BackboneSpec(input_shape=task.train.inputs.shape[1:])

    # stage 1: pooled backbone, no attributes
    vanilla, _ = train(pretrain_model(spec, 0), task.train, task.val, TrainConfig(epochs=8, lr=3e-3))

    # stage 2: backbone frozen, only the embedder and generators train
    model = attach_hyperadapt(vanilla, task.schema, AdapterConfig(rank=2), EmbedderConfig(), seed=0)
    adapted, history = train(model, task.train, task.val, TrainConfig(epochs=8, lr=1e-2, stage="adapt"))

    for name, m in (("vanilla", vanilla), ("hyperadapt", adapted)):
        r = evaluate(m, task.test, task.num_groups)
        groups = "  ".join(f"g{g}={f:.3f}" for g, f in enumerate(r.group_f1))
        print(f"{name:11} acc={r.accuracy:.3f} f1={r.f1:.3f} eopp1={r.eopp1:.3f}  group F1: {groups}")
    print(f"best adapter epoch: {history.best_epoch}")


if __name__ == "__main__":
    main()
