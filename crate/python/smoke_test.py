"""Smoke test for the morpheus_py extension.

Build the extension first:

    cargo build --release -p morpheus-py --features extension-module

The script imports an installed `morpheus_py` if there is one, and otherwise
loads the shared library from the cargo target directory.
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
LIBRARY_NAMES = ("libmorpheus_py.so", "libmorpheus_py.dylib", "morpheus_py.dll")


def load_extension():
    try:
        import morpheus_py

        return morpheus_py
    except ImportError:
        pass
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    for profile in ("release", "debug"):
        for name in LIBRARY_NAMES:
            path = os.path.join(target, profile, name)
            if os.path.exists(path):
                loader = importlib.machinery.ExtensionFileLoader("morpheus_py", path)
                spec = importlib.util.spec_from_loader("morpheus_py", loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                return module
    sys.exit("morpheus_py not found; build it with "
             "`cargo build --release -p morpheus-py --features extension-module`")


def main():
    m = load_extension()
    print(f"morpheus_py {m.__version__}")

    loss, _, _ = m.vq_loss([1.0, 0.0], [0.0, 0.0], 0.05)
    assert loss == 1.05, loss
    assert abs(m.contrastive_loss([1.0, 0.0], [[0.0, 1.0]] * 3, 0) - math.log(3)) < 1e-12
    assert abs(m.distinct(["a b a"]) - 2 / 3) < 1e-12
    assert m.nucleus_sample([0.0, 3.0, 1.0], 1e-12) == 1

    with tempfile.TemporaryDirectory() as d:
        counts = m.synthesize(d, "roles_count = 9\ndialogues_per_role = 2\nturns_per_dialogue = 3\n")
        config = "\n".join([
            "codebook_size = 6", "d_model = 16", "layers = 1", "heads = 2",
            "max_sequence_length = 48", "learning_rate = 0.003", "warmup_steps = 2",
            "batch_size = 4", "stage1_epochs = 1", "stage3_epochs = 1",
            "em_max_iters = 10", "max_response_tokens = 8",
        ])
        trainer = m.Trainer(os.path.join(d, "train.jsonl"), config)
        trainer.train_all()
        history = [("a", "hi , how are you ?"), ("b", "hello there !"), ("a", "do you have any pets ?")]
        reply = trainer.generate(history, "b", seed=1)
        accuracy = trainer.code_accuracy(os.path.join(d, "test.jsonl"))
        print(f"trained on {counts['train']} samples; code accuracy {accuracy:.3f}")
        print(f"codes {[k for k, _ in reply['codes']]} -> {reply['text']!r}")

    print("smoke test passed")


if __name__ == "__main__":
    main()
