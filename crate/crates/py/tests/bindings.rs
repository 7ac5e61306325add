use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

/// Runs `code` with the bindings importable as `m` and the given string
/// variables in scope.
fn run(code: &str, vars: &[(&str, &str)]) {
    Python::attach(|py| {
        let m = PyModule::new(py, "morpheus_py").unwrap();
        morpheus_py::register(&m).unwrap();
        let locals = PyDict::new(py);
        locals.set_item("m", m).unwrap();
        for (k, v) in vars {
            locals.set_item(*k, *v).unwrap();
        }
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, None, Some(&locals)) {
            e.display(py);
            panic!("python code failed: {e}");
        }
    });
}

#[test]
fn codebook_and_losses() {
    run(
        r#"
cb = m.Codebook.from_vectors([[0.0, 0.0], [3.0, 4.0]])
assert (cb.size, cb.dim, len(cb)) == (2, 2, 2)
assert cb.lookup([2.9, 4.0])[0] == 1
assert cb.usage_counts() == [0, 1]
assert cb.usage_perplexity() == 1.0
k, dist = m.nearest_code([0.0, 1.0], [[0.0, 0.0], [3.0, 4.0]])
assert (k, dist) == (0, 1.0)

loss, grad_code, grad_p = m.vq_loss([1.0, 0.0], [0.0, 0.0], 0.05)
assert loss == 1.05
assert grad_code == [-2.0, 0.0]
assert abs(grad_p[0] - 0.1) < 1e-15

import math
assert abs(m.contrastive_loss([1.0, 0.0], [[0.0, 1.0], [0.0, 1.0]], 1) - math.log(2)) < 1e-12

pts = [[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]]
fit = m.Codebook.em_fit(pts, 2, seed=1)
ll = fit.log_likelihood()
assert all(b >= a for a, b in zip(ll, ll[1:]))
assert sorted(round(v[0]) for v in fit.vectors()) == [0, 10]
"#,
        &[],
    );
}

#[test]
fn errors_map_to_exception_classes() {
    run(
        r#"
def raises(exc, f, *args):
    try:
        f(*args)
    except exc:
        return
    raise AssertionError(f"{f.__name__} did not raise {exc.__name__}")

raises(ValueError, m.vq_loss, [1.0], [0.0], -1.0)
raises(RuntimeError, m.nearest_code, [1.0, 2.0], [[0.0]])
raises(ArithmeticError, m.nucleus_sample, [float("nan"), 0.0])
raises(OSError, m.Codebook.load, "/nonexistent/codebook.bin")
"#,
        &[],
    );
}

#[test]
fn sampler_and_metrics() {
    run(
        r#"
assert m.nucleus_sample([0.0, 5.0, 1.0], 1e-12) == 1
assert m.nucleus_sample([0.3, 0.2, 0.1], 1.0, 1.0, 7) == m.nucleus_sample([0.3, 0.2, 0.1], 1.0, 1.0, 7)
support = m.nucleus_support([2.0, 1.0, 0.0], 0.5)
assert support[0][0] == 0 and abs(sum(p for _, p in support) - 1.0) < 1e-12

assert abs(m.bleu("a b c", "a x c") - 2 / 3) < 1e-12
assert abs(m.rouge_l("a b c", "a c") - 0.8) < 1e-12
assert abs(m.distinct(["a b a"]) - 2 / 3) < 1e-12
assert abs(m.p_co("hiking fun", "hiking trails") - 0.5) < 1e-12
report = m.evaluate(["i like hiking ."], ["i like hiking ."], ["i like hiking."])
assert set(report) >= {"BLEU-1", "BLEU-2", "ROUGE-L", "Dist-1", "Dist-2", "sBLEU", "P-Co"}
assert report["BLEU-1"] == 1.0 and report["samples"] == 1
"#,
        &[],
    );
}

#[test]
fn trainer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    run(
        r#"
import os
counts = m.synthesize(d, "roles_count = 9\ndialogues_per_role = 2\nturns_per_dialogue = 3\n")
assert counts["train"] > 0 and counts["test"] > 0
train = os.path.join(d, "train.jsonl")
test = os.path.join(d, "test.jsonl")
cfg = """
codebook_size = 6
d_model = 16
layers = 1
heads = 2
max_sequence_length = 48
learning_rate = 0.003
warmup_steps = 2
batch_size = 4
stage1_epochs = 1
stage3_epochs = 1
em_max_iters = 10
max_response_tokens = 6
"""
t = m.Trainer(train, cfg)
assert t.codebook() is None
try:
    t.stage3()
    raise AssertionError("stage 3 ran before stage 1")
except ValueError:
    pass
assert all(x == x for x in t.stage1())
assert t.stage2() == counts["train"] * 4
t.stage3()
cb = t.codebook()
assert (cb.size, cb.dim) == (6, 16)
assert 0.0 <= t.code_accuracy(test) <= 1.0

history = [("a", "hi , how are you ?"), ("b", "hello there !"), ("a", "what is your job ?")]
g = t.generate(history, "b", seed=3)
assert g == t.generate(history, "b", seed=3)
assert len(g["codes"]) == 4 and len(g["tokens"]) <= 6

ckpt = os.path.join(d, "model.ckpt")
t.save(ckpt)
back = m.Trainer.load(ckpt, train)
assert back.generate(history, "b", seed=3) == g
assert back.config_toml == t.config_toml

report = t.freeze_for_peft()
assert report["trainable"] == report["codebook"] + report["classifier"] + report["projection"]
assert report["fraction"] < 1.0
"#,
        &[("d", dir.path().to_str().unwrap())],
    );
}
