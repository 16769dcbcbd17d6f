"""Train the convolutional classifier on the built-in keyword corpus.

Generates a 4-class corpus, builds a vocabulary and a random embedding
table, then runs plain SGD while tracking test accuracy per epoch.
"""

import numpy as np

from textdistill import evaluate as E
from textdistill import model as M
from textdistill import textdata as td

spec = E.SyntheticSpec(num_classes=4, n_train=800, n_test=200, seed=0)
train_texts, train_labels, test_texts, test_labels = E.synthetic_corpus(spec)

vocab = td.build_vocab(train_texts)
table = td.random_embedding_table(vocab, dim=16, seed=0)
train = td.Dataset.from_texts(train_texts, train_labels, vocab, 40, 4)
test = td.Dataset.from_texts(test_texts, test_labels, vocab, 40, 4)
print(f"corpus: {len(train)} train / {len(test)} test, vocab {len(vocab)}")

config = M.ModelConfig(embedding_dim=16, num_classes=4, widths=(3, 4, 5),
                       channels=16, max_len=40)
train_spec = E.TrainSpec("full", epochs=6, batch_size=20, alpha=0.2, seed=0)
params, report = E.train_model(train_spec, config, train, table, test)

for epoch, acc in enumerate(report.per_epoch, start=1):
    print(f"epoch {epoch}: test accuracy {acc:.4f}")
print(f"final accuracy {report.final_accuracy:.4f} in {report.wall_time:.1f}s")

# the checkpoint container round-trips the trained parameters
M.save_params("/tmp/textcnn_demo.ckpt", params)
reloaded = M.load_params("/tmp/textcnn_demo.ckpt")
print("checkpoint reload accuracy:",
      round(M.accuracy(reloaded, test, table), 4))
