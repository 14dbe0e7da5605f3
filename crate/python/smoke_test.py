"""Smoke test for the sate_py extension.

Build it first with `cargo build --release -p sate-py`, then run
`python3 python/smoke_test.py`. The script copies the shared library to a
temporary directory under the module's import name and imports it from
there.
"""

import importlib
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libsate_py.so"
        if lib.exists():
            break
    else:
        sys.exit("libsate_py.so not found; run `cargo build --release -p sate-py`")
    tmp = Path(tempfile.mkdtemp())
    shutil.copy(lib, tmp / "sate_py.so")
    sys.path.insert(0, str(tmp))
    return importlib.import_module("sate_py")


def main():
    sp = load_module()

    # Two frames, uniform over {blank, a}: paths "aa", "a-", "-a" all give "a".
    half = [math.log(0.5)] * 2
    loss = sp.ctc_loss([half, half], [1])
    assert abs(loss - (-math.log(0.75))) < 1e-6, loss
    assert abs(sp.brute_force_ctc([half, half], [1]) - loss) < 1e-9
    assert sp.ctc_loss([half], [1, 1]) is None

    assert sp.wer([1, 2, 3, 4], [1, 2, 9, 4]) == 0.25
    assert sp.bleu4([[1, 2, 3, 4]], [[1, 2, 3, 4]]) == 100.0
    assert sp.localness([[1.0, 0.0], [0.0, 1.0]], 2) == [1.0, 1.0]
    assert abs(sp.lr_at(100, 1e-3, 400) - 2.5e-4) < 1e-12

    data = {
        "data.vocab_size": "6",
        "data.min_len": "2",
        "data.max_len": "4",
        "data.n_train": "40",
        "data.n_dev": "8",
        "data.n_test": "8",
    }
    corpus = sp.Corpus(data)
    source, target, frames = corpus.example("train", 0)
    assert len(target) == len(source) and len(frames[0]) == 16

    settings = {
        "recipe.kind": "sate",
        "model.vocab_size": "7",
        "model.d_model": "8",
        "model.n_heads": "2",
        "model.d_ffn": "16",
        "model.n_layers_acoustic": "2",
        "model.n_layers_textual": "1",
        "model.n_layers_decoder": "1",
        "model.ctc_layer_index": "2",
        "train.max_steps": "10",
        "train.eval_interval": "5",
        "train.batch_frames": "200",
    }
    model, log = sp.train(corpus, settings)
    assert model.kind == "sate" and model.num_parameters() > 0
    assert any(split == "dev" for _, split, _, _ in log)
    metric, value = model.evaluate(corpus, "test", 2)
    assert metric == "bleu" and 0.0 <= value <= 100.0
    assert all(0.0 <= v <= 1.0 for v in model.localness(corpus))

    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "m.ckpt")
        model.save(path)
        again = sp.Model.load(path, settings)
        assert again.decode(corpus, "dev", 0, 2) == model.decode(corpus, "dev", 0, 2)
        avg = str(Path(d) / "avg.ckpt")
        sp.average_checkpoints([path, path], avg)
        assert Path(avg).read_bytes() == Path(path).read_bytes()

    try:
        sp.Corpus({"data.vocab_size": "0"})
    except ValueError:
        pass
    else:
        raise AssertionError("invalid settings accepted")

    print("sate_py smoke test passed")


if __name__ == "__main__":
    main()
