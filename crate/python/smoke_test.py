# SPDX-License-Identifier: MIT OR Apache-2.0
"""Smoke test for the Python bindings.

Build and install first:  pip install ./crates/py  (or maturin develop -m crates/py/Cargo.toml)
"""

import os
import tempfile

import otter


def main():
    texts = otter.gen_corpus("speculative", seed=0, count=32)
    base = otter.Otter.random_base(d_inp=16, n_layers=2, n_heads=2, seed=0)
    base.set_trainable(0)
    base.train("lm", texts, config={"epochs": 30, "lr": 3e-3})
    base.freeze()

    model = base.base()
    idx = model.expand("draft", d_ext=8, d_inner_ext=16)
    model.init_extension(idx, "copy", seed=1)
    model.attach_generation_heads(idx, k=4)
    curve = model.train("draft", texts, ext=idx, config={"epochs": 80, "lr": 3e-3, "reg_lambda": 50.0})
    model.freeze()
    print(f"draft training: {len(curve)} steps, final loss {curve[-1]['total']:.4f}")

    report = otter.verify(base, model, n_prompts=100, tol=1e-5)
    print(f"verified on {len(report['per_prompt'])} prompts, max deviation {report['max_deviation']:.2e}")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "draft.ckpt")
        model.save(path)
        loaded = otter.Otter.load(path)
    prompt = texts[0][:8]
    fast = loaded.decode(prompt, "speculative", max_new_tokens=24)
    slow = loaded.decode(prompt, "greedy", max_new_tokens=24)
    assert fast["tokens"] == slow["tokens"]
    accepted = fast["accepted_lengths"]
    print(f"{prompt!r} -> {fast['text']!r}, mean accepted {sum(accepted) / len(accepted):.2f}")

    try:
        otter.verify(otter.Otter.random_base(d_inp=16, n_layers=2, n_heads=2, seed=9), model, n_prompts=4)
    except otter.OtterError as e:
        print(f"mismatched base rejected: {e}")
    else:
        raise AssertionError("verification against a different base passed")

    print(otter.scale_report())
    print("ok")


if __name__ == "__main__":
    main()
