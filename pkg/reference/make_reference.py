"""Regenerate the tiny example files in this directory: python reference/make_reference.py"""

import json
from pathlib import Path

from tafenet import checkpoint
from tafenet import evaluate as ev
from tafenet.data import SyntheticConfig, generate_synthetic, save_features_text, write_dataset
from tafenet.model import ModelConfig, TAFENet

HERE = Path(__file__).resolve().parent


def main():
    ds = generate_synthetic(SyntheticConfig(n_attributes=4, n_classes_seen=2, n_classes_unseen=1, samples_per_class=3,
                                            feature_dim=3, n_groups=1, group_bits=2, test_fraction=0.34, seed=0))
    write_dataset(ds, HERE)
    save_features_text(ds.store, HERE / "features.csv")
    composition = {
        "format": "tafenet-tasks", "version": 1, "kind": "concatenated-word-embeddings",
        "attributes": {"wet": [0.1, 0.4], "old": [-0.3, 0.2]},
        "objects": {"dog": [0.5, 0.0, 0.2], "car": [-0.1, 0.3, 0.7]},
        "pairs": [{"id": 0, "attribute": "wet", "object": "dog"}, {"id": 1, "attribute": "old", "object": "car"},
                  {"id": 2, "attribute": "wet", "object": "car"}],
    }
    (HERE / "composition_tasks.json").write_text(json.dumps(composition, indent=1) + "\n", encoding="utf-8")
    net = TAFENet(ModelConfig(d_in=3, d_task=4, widths=(4, 4), embed_hidden=4), seed=0, n_train_tasks=2)
    checkpoint.save_model(HERE / "model.ckpt", net)
    ev.dump_embeddings(net, ds.store, ds.tasks, HERE / "embeddings.tsv", [0, 2], rows=[0, 1])
    ev.gzsl_eval(net, ds.store, ds.tasks, ds.split).write(HERE / "eval_gzsl.json")


if __name__ == "__main__":
    main()
