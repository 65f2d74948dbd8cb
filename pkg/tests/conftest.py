import numpy as np
import pytest

from ftlab import data as D
from ftlab import encoder as E
from ftlab import trainer as TR

# Desk-scale pipeline shared by the slow tests: one pretraining corpus and one
# labelled task drawn from the same word inventory.
TASK = D.SynthTaskSpec(num_classes=2, size=400, marker_prob=0.8, seed=1)
PRETRAIN_CORPUS = D.SynthTaskSpec(num_classes=2, size=2000, marker_prob=0.8, seed=99)


def tiny_config(**kw):
    base = dict(vocab_size=12, num_layers=4, hidden=8, heads=2, ff_dim=16, max_seq_len=6, dropout_p=0.0)
    base.update(kw)
    return E.EncoderConfig(**base)


def random_params(cfg, num_classes=3, head_in=None, seed=0, std=0.3):
    """Parameters with a larger spread than the training init, so gradients
    are well away from zero in finite-difference checks."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in E.encoder_shapes(cfg).items():
        if name.endswith(".gain"):
            params[name] = 1.0 + 0.2 * rng.standard_normal(shape)
        else:
            params[name] = std * rng.standard_normal(shape)
    for name, shape in E.head_shapes(head_in or cfg.hidden, num_classes).items():
        params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return params


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def task_vocab():
    return E.Vocabulary(TASK.words())


@pytest.fixture(scope="session")
def pretrained(task_vocab):
    cfg = E.EncoderConfig(vocab_size=len(task_vocab))
    corpus = [e.text for e in D.generate_synth(PRETRAIN_CORPUS)]
    return TR.pretrain_toy(corpus, task_vocab, cfg, TR.PretrainConfig(steps=400), seed=0)


@pytest.fixture(scope="session")
def task_examples():
    return D.generate_synth(TASK)


@pytest.fixture(scope="session")
def pretrained_path(pretrained, tmp_path_factory):
    from ftlab.checkpoint import save_checkpoint

    return save_checkpoint(pretrained, tmp_path_factory.mktemp("ckpt") / "pretrained.ftlb")


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
