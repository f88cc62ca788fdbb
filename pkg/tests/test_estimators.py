import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dexct.estimators import InnerProductReconstructor, JointTVReconstructor
from dexct.geometry import Geometry
from dexct.model import DualEnergySystem, ImagePair, PVC_IODINE, simulate_measurement
from dexct.phantoms import PhantomSpec, generate


@pytest.fixture(scope="module")
def measurement():
    geo = Geometry.parallel_beam(16, 13)
    system = DualEnergySystem(PVC_IODINE, geo, geo)
    phantom = generate(PhantomSpec("bone", 16))
    return simulate_measurement(phantom, system, 0.01, 0.0, seed=0), phantom


class TestInnerProductReconstructor:
    def test_params_roundtrip_and_clone(self):
        est = InnerProductReconstructor(alpha=10.0, beta=8.0, tol=1e-6)
        params = est.get_params()
        assert params["alpha"] == 10.0
        est2 = clone(est)
        assert est2.get_params() == params
        est2.set_params(alpha=20.0)
        assert est2.alpha == 20.0 and est.alpha == 10.0

    def test_fit_attributes(self, measurement):
        m, _ = measurement
        est = InnerProductReconstructor(alpha=50.0, beta=40.0, tol=1e-6, max_iters=60)
        est.fit(m)
        assert est.converged_
        assert est.image1_.shape == (16, 16)
        assert np.all(est.image1_ >= 0.0) and np.all(est.image2_ >= 0.0)
        assert est.n_iter_ == est.report_.n_iterations

    def test_fit_transform_returns_pair(self, measurement):
        m, _ = measurement
        pair = InnerProductReconstructor(alpha=50.0, beta=40.0, tol=1e-6).fit_transform(m)
        assert isinstance(pair, ImagePair)

    def test_predict_requires_fit(self, measurement):
        m, _ = measurement
        with pytest.raises(NotFittedError):
            InnerProductReconstructor().predict(m)

    def test_predict_reprojects(self, measurement):
        m, _ = measurement
        est = InnerProductReconstructor(alpha=50.0, beta=40.0, tol=1e-6).fit(m)
        reproj = est.predict(m)
        assert reproj.low.shape == m.low.shape
        # data misfit of the reconstruction is far below the raw data energy
        assert np.linalg.norm(reproj.stacked() - m.stacked()) < np.linalg.norm(m.stacked())

    def test_rejects_wrong_input(self):
        with pytest.raises(TypeError):
            InnerProductReconstructor().fit(np.zeros((4, 4)))

    def test_convexity_guard(self, measurement):
        m, _ = measurement
        with pytest.raises(ValueError):
            InnerProductReconstructor(alpha=1.0, beta=2.0).fit(m)


class TestJointTVReconstructor:
    def test_fit_attributes(self, measurement):
        m, _ = measurement
        est = JointTVReconstructor(gamma=0.001, n_iters=30)
        est.fit(m)
        assert est.n_iter_ == 30
        assert np.all(est.image1_ >= 0.0)

    def test_clone_compatible(self):
        est = JointTVReconstructor(gamma=0.01)
        assert clone(est).get_params()["gamma"] == 0.01

    def test_separation_favors_inner_product(self, measurement):
        # the inner-product penalty should leave materials at least as
        # separated as the TV baseline on the same data
        m, _ = measurement
        ip = InnerProductReconstructor(alpha=50.0, beta=40.0, tol=1e-6).fit(m)
        tv = JointTVReconstructor(gamma=0.001, n_iters=60).fit(m)
        ip_overlap = float(np.sum(ip.image1_ * ip.image2_)) / 16**2
        tv_overlap = float(np.sum(tv.image1_ * tv.image2_)) / 16**2
        assert ip_overlap <= tv_overlap * 1.5 + 1e-9
