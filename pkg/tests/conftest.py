import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy8(tmp_path_factory):
    """2 speakers x 4 utterances with MFCC k-means units (vocab 16)."""
    from prosody_disentangle.data import CorpusCache
    from prosody_disentangle.toy import make_toy_corpus
    from prosody_disentangle.units import mfcc_fallback, quantize, refine, train_codebook

    root = tmp_path_factory.mktemp("toy8")
    manifest = make_toy_corpus(root, n_speakers=2, utts_per_speaker=4, seed=0)
    cache = CorpusCache(manifest)
    feats = [mfcc_fallback(cache.waveform(u)) for u in manifest.utt_ids]
    book = train_codebook(feats, 16, seed=0)
    cache.units = {f.utt_id: refine(quantize(f, book)) for f in feats}
    return manifest, cache


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
