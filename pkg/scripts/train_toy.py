"""Overfits the width-reduced model on the synthetic 3-class dataset and
writes the loss history CSV."""
import argparse

from liteseg import build_liteseg
from liteseg.graph import forward
from liteseg.model import init_liteseg_weights, toy_config
from liteseg.train import OptimizerState, history_csv, synthetic_dataset, train_toy

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default="toy_history.csv")
    args = ap.parse_args()

    g = build_liteseg(toy_config())
    w = init_liteseg_weights(g, args.seed)
    ds = synthetic_dataset(4, 64, 3, seed=args.seed)
    hist, trained = train_toy(g, w, ds, args.epochs, OptimizerState(initial_lr=args.lr, max_epochs=args.epochs))
    with open(args.csv, "w") as fh:
        fh.write(history_csv(hist))
    for r in hist[:: max(len(hist) // 10, 1)] + [hist[-1]]:
        print(f"epoch {r.epoch:4d}  lr {r.lr:.5f}  loss {r.loss:.4f}  acc {r.pixel_acc:.4f}")
    acc = (forward(g, ds[0], trained)["logits"].argmax(1) == ds[1][:, 0]).mean()
    print(f"eval-mode pixel accuracy: {acc:.4f}")
