import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aniso_eikonal.io import (
    MeshFormatError, read_measurements, read_off, read_tensor_csv, read_vtk, write_activation_csv,
    write_measurements, write_off, write_tensor_csv, write_trace_csv, write_vtk,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_off_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(5, 3)) * 1e3
    t = np.array([[0, 1, 2], [2, 3, 4]])
    write_off(str(tmp_path / "m.off"), v, t)
    v2, t2 = read_off(str(tmp_path / "m.off"))
    assert v2.tobytes() == v.tobytes()
    np.testing.assert_array_equal(t2, t)


def test_off_with_comments_and_bad_header(tmp_path):
    p = tmp_path / "c.off"
    p.write_text("OFF\n# a comment\n3 1 0\n0 0 0\n1 0 0 # tail\n0 1 0\n3 0 1 2\n")
    v, t = read_off(str(p))
    assert v.shape == (3, 3) and t.tolist() == [[0, 1, 2]]
    p.write_text("COFF\n3 1 0\n")
    with pytest.raises(MeshFormatError):
        read_off(str(p))
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0\n")
    with pytest.raises(MeshFormatError):
        read_off(str(p))


def test_vtk_roundtrip_with_arrays(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(4, 3))
    tri = np.array([[0, 1, 2], [0, 2, 3]])
    pd = {"u_ms": rng.normal(size=4)}
    cd = {"v_fiber": rng.random(2), "fiber_dir": rng.normal(size=(2, 3)), "D_world": rng.normal(size=(2, 3, 3))}
    write_vtk(str(tmp_path / "r.vtk"), pts, tri, pd, cd)
    d = read_vtk(str(tmp_path / "r.vtk"))
    assert d.points.tobytes() == pts.tobytes()
    np.testing.assert_array_equal(d.triangles, tri)
    assert d.point_data["u_ms"].tobytes() == pd["u_ms"].tobytes()
    for k, v in cd.items():
        np.testing.assert_array_equal(d.cell_data[k], v)


def test_measurements_roundtrip_and_empty(tmp_path):
    pts = np.array([[1.5, -2.0, 3.25], [0.1, 0.2, 0.3]])
    t = np.array([0.0, 12.5])
    write_measurements(str(tmp_path / "m.csv"), pts, t)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "x_mm,y_mm,z_mm,lat_ms"
    p2, t2 = read_measurements(str(tmp_path / "m.csv"))
    np.testing.assert_array_equal(p2, pts)
    np.testing.assert_array_equal(t2, t)
    (tmp_path / "e.csv").write_text("")
    p3, t3 = read_measurements(str(tmp_path / "e.csv"))
    assert p3.shape == (0, 3) and t3.shape == (0,)
    (tmp_path / "b.csv").write_text("x,y,z,t\n1,2,3,4\n")
    with pytest.raises(ValueError, match="header"):
        read_measurements(str(tmp_path / "b.csv"))


def test_tensor_csv_order_and_ids(tmp_path):
    d = np.arange(9.0).reshape(3, 3)
    write_tensor_csv(str(tmp_path / "t.csv"), d)
    np.testing.assert_array_equal(read_tensor_csv(str(tmp_path / "t.csv")), d)
    (tmp_path / "s.csv").write_text("tri_id,d1,d2,d3\n1,4,5,6\n0,1,2,3\n")
    np.testing.assert_array_equal(read_tensor_csv(str(tmp_path / "s.csv")), [[1, 2, 3], [4, 5, 6]])
    (tmp_path / "g.csv").write_text("tri_id,d1,d2,d3\n0,1,2,3\n2,4,5,6\n")
    with pytest.raises(ValueError, match="tri_id"):
        read_tensor_csv(str(tmp_path / "g.csv"))


def test_activation_and_trace_headers(tmp_path):
    write_activation_csv(str(tmp_path / "a.csv"), np.array([0.0, 1.5]))
    assert (tmp_path / "a.csv").read_text() == "vertex_id,u_ms\n0,0.0\n1,1.5\n"
    write_trace_csv(str(tmp_path / "tr.csv"), [{"iter": 1, "data_term": 2.0, "tv_term": 0.5, "L": 4.0, "step_norm": 0.1}])
    lines = (tmp_path / "tr.csv").read_text().splitlines()
    assert lines[0] == "iter,data_term,tv_term,L,step_norm" and lines[1].startswith("1,2.0,0.5,4.0")


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 12), st.just(3)), elements=finite))
def test_off_vertices_roundtrip_property(tmp_path_factory, v):
    p = tmp_path_factory.mktemp("off") / "p.off"
    tri = np.array([[0, 1, 2]])
    write_off(str(p), v, tri)
    v2, _ = read_off(str(p))
    assert v2.tobytes() == np.asarray(v, float).tobytes()
