import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from omnidet.estimator import OmniSupervisedDetector, check_images, check_manifest
from omnidet.model import save_checkpoint

TINY = dict(iterations=3, val_every=3, batch_size=2, warmup_iterations=1, lr_step=2, fpn_channels=16,
            image_size=64, backbone_widths=(8, 8, 16, 16))


def small_estimator(**kw):
    return OmniSupervisedDetector(**{**TINY, **kw})


def test_params_round_trip():
    est = small_estimator(strategy="SLA")
    params = est.get_params()
    assert params["strategy"] == "SLA" and params["iterations"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(beta=2.0)
    assert est.beta == 2.0


class TestCheckImages:
    def test_gray_promoted(self):
        out = check_images(np.zeros((2, 64, 64)))
        assert out.shape == (2, 3, 64, 64) and str(out.dtype) == "torch.uint8"

    @pytest.mark.parametrize("bad", [np.zeros((2, 2, 64, 64)), np.zeros((64, 64)), np.full((1, 64, 64), 300.0),
                                     np.full((1, 64, 64), np.nan), np.zeros((0, 3, 64, 64))])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            check_images(bad)

    def test_size_check(self):
        with pytest.raises(ValueError):
            check_images(np.zeros((1, 3, 32, 32), np.uint8), image_size=64)


def test_check_manifest_type():
    with pytest.raises(TypeError):
        check_manifest(42)


def test_unfitted_predict():
    with pytest.raises(NotFittedError):
        small_estimator().predict(np.zeros((1, 3, 64, 64), np.uint8))


def test_fit_predict_score(tiny_dataset, tmp_path):
    root, mans = tiny_dataset
    est = small_estimator()
    est.fit(root / "train", val=root / "val")
    assert len(est.history_) == 3 and est.best_iteration_ >= 1
    dets = est.predict(mans["test"])
    assert len(dets) == len(mans["test"])
    assert all(0 <= d.score <= 1 for ds in dets for d in ds)
    imgs = np.zeros((2, 64, 64), np.uint8)
    assert len(est.predict(imgs)) == 2
    assert est.decision_function(imgs).shape == (2,)
    s = est.score(mans["test"])
    assert 0.0 <= s <= 1.0
    path = save_checkpoint(est.model_, tmp_path / "m.pt")
    again = OmniSupervisedDetector.from_checkpoint(path)
    assert np.allclose(again.decision_function(imgs), est.decision_function(imgs))

