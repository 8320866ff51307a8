"""Driver for the {{experiment_name}} sample experiment.

Every step is deterministic: the dataset comes from a seeded generator and
the model is an ordinary least-squares line, so repeated runs produce
byte-identical outputs.
"""

import argparse
import json
import os
import random
from pathlib import Path


def prepare(args):
    rng = random.Random(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y\n")
        for i in range(args.rows):
            x = i / args.rows
            y = 3.0 * x + 0.5 + rng.gauss(0.0, 0.1)
            fh.write(f"{x!r},{y!r}\n")


def train(args):
    xs, ys = [], []
    with open(args.data, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            x, y = line.strip().split(",")
            xs.append(float(x))
            ys.append(float(y))
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sxx
    intercept = my - slope * mx
    mse = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys)) / n
    out = Path(args.model)
    out.parent.mkdir(parents=True, exist_ok=True)
    model = {"slope": round(slope, 6), "intercept": round(intercept, 6), "mse": round(mse, 6), "n": n}
    out.write_text(json.dumps(model, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    # report the metric to the engine's metrics service, when one is running
    inbox = os.environ.get("EXPFLOW_METRICS_INBOX")
    if inbox:
        with open(inbox, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"name": "mse", "step": 0, "value": model["mse"]}) + "\n")


def report(args):
    model = json.loads(Path(args.model).read_text(encoding="utf-8"))
    text = Path(args.template).read_text(encoding="utf-8")
    for key, value in {"title": args.title, **model}.items():
        text = text.replace("<" + key + ">", str(value))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")


def main():
    parser = argparse.ArgumentParser()
    sub = parser.add_subparsers(dest="step", required=True)
    p = sub.add_parser("prepare")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--out", required=True)
    t = sub.add_parser("train")
    t.add_argument("--data", required=True)
    t.add_argument("--model", required=True)
    r = sub.add_parser("report")
    r.add_argument("--model", required=True)
    r.add_argument("--template", required=True)
    r.add_argument("--title", required=True)
    r.add_argument("--out", required=True)
    args = parser.parse_args()
    {"prepare": prepare, "train": train, "report": report}[args.step](args)


if __name__ == "__main__":
    main()
