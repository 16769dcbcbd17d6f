"""End-to-end distillation at toy scale (about two minutes on one core).

Compresses an 800-document corpus into 3 matrices per class, then compares
classifiers trained on the full data, a random size-matched subset, and the
synthetic matrices.
"""

import numpy as np

from textdistill import distill as D
from textdistill import evaluate as E
from textdistill import model as M
from textdistill import textdata as td

spec = E.SyntheticSpec(num_classes=4, n_train=800, n_test=200, seed=1)
train_texts, train_labels, test_texts, test_labels = E.synthetic_corpus(spec)
vocab = td.build_vocab(train_texts)
table = td.random_embedding_table(vocab, dim=16, seed=1)
train = td.Dataset.from_texts(train_texts, train_labels, vocab, 40, 4)
test = td.Dataset.from_texts(test_texts, test_labels, vocab, 40, 4)

model_config = M.ModelConfig(embedding_dim=16, num_classes=4, widths=(3, 4, 5),
                             channels=16, max_len=40)
config = D.DistillConfig(per_class=3, seq_len=40, embedding_dim=16,
                         alpha_inner=0.2, alpha_outer=0.01, inner_epochs=10,
                         inner_batch=12, outer_steps=120, real_batch=32,
                         init_mode="real", outer_optimizer="adam", seed=1)

losses = []
dset = D.run_distillation(train, table, model_config, config,
                          callback=lambda m: losses.append(m["outer_loss"]))
print(f"distilled {len(dset)} matrices of shape "
      f"{dset.seq_len}x{dset.embedding_dim}")
print(f"outer loss: first 10 mean {np.mean(losses[:10]):.3f}, "
      f"last 10 mean {np.mean(losses[-10:]):.3f}")

eval_config = E.EvalConfig(epochs=8, batch_size=12, alpha=0.2, seeds=(0, 1, 2))
rows = E.compare_protocol(train, test, dset, eval_config, model_config, table)
for name, stats in E.summarize(rows).items():
    print(f"{name:10s} accuracy {stats['mean_accuracy']:.4f} "
          f"(sd {stats['sd_accuracy']:.4f}) "
          f"relative {stats['mean_relative_pct']:.1f}%")

# the artifact container: binary plus a lossless JSON mirror
D.save_distilled("/tmp/demo.ddtc", dset, table.content_hash())
loaded, _ = D.load_distilled("/tmp/demo.ddtc")
print("artifact round-trip bitwise:",
      np.array_equal(loaded.matrices, dset.matrices.astype(np.float32)))
