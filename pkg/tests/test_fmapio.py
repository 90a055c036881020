import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_fmap, make_meta
from expgraph import fmapio
from expgraph.errors import (
    BadMagic,
    HeaderParseError,
    IndexOutOfRange,
    NonFiniteValues,
    PayloadSizeMismatch,
    SchemaError,
)
from expgraph.fmapio import (
    FeatureMapSet,
    dump_fmap_bytes,
    load_fmap,
    load_fmap_bytes,
    load_feature_map_set,
    load_manifest,
    normalize_responses,
    project_position,
    unit_grid,
    write_fmap,
    write_manifest,
)


class TestContainer:
    def test_resnet_shape_round_trip(self):
        fm = make_fmap(np.zeros((256, 14, 14)), layer_id="res4")
        out = load_fmap_bytes(dump_fmap_bytes(fm))
        assert out.values.size == 50176
        assert out.values.shape == (256, 14, 14)
        assert out.meta.layer_id == "res4"

    def test_zero_payload_loads(self):
        fm = make_fmap(np.zeros((2, 3, 3)))
        out = load_fmap_bytes(dump_fmap_bytes(fm))
        assert (out.values == 0.0).all()

    def test_truncated_payload_names_offset(self):
        buf = dump_fmap_bytes(make_fmap(np.ones((2, 3, 3))))
        with pytest.raises(PayloadSizeMismatch) as exc:
            load_fmap_bytes(buf[:-4])
        payload_offset = 12 + struct.unpack_from("<I", buf, 8)[0]
        assert str(payload_offset) in str(exc.value)
        with pytest.raises(PayloadSizeMismatch):
            load_fmap_bytes(buf + b"\x00\x00\x00\x00")

    def test_bad_magic_names_offset_zero(self):
        buf = dump_fmap_bytes(make_fmap(np.ones((1, 2, 2))))
        with pytest.raises(BadMagic) as exc:
            load_fmap_bytes(b"XXXX0001" + buf[8:])
        assert "byte 0" in str(exc.value)

    def test_non_canonical_header_rejected(self):
        buf = dump_fmap_bytes(make_fmap(np.ones((1, 2, 2))))
        hlen = struct.unpack_from("<I", buf, 8)[0]
        header = json.loads(buf[12 : 12 + hlen])
        loose = json.dumps(header, sort_keys=True, indent=1).encode()
        rebuilt = buf[:8] + struct.pack("<I", len(loose)) + loose + buf[12 + hlen :]
        with pytest.raises(HeaderParseError):
            load_fmap_bytes(rebuilt)

    def _mutate_header(self, buf, fn):
        hlen = struct.unpack_from("<I", buf, 8)[0]
        header = json.loads(buf[12 : 12 + hlen])
        fn(header)
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return buf[:8] + struct.pack("<I", len(hbytes)) + hbytes + buf[12 + hlen :]

    def test_unknown_header_key_rejected(self):
        buf = dump_fmap_bytes(make_fmap(np.ones((1, 2, 2))))
        bad = self._mutate_header(buf, lambda h: h.update(extra=1))
        with pytest.raises(HeaderParseError):
            load_fmap_bytes(bad)

    def test_integer_stride_rejected(self):
        buf = dump_fmap_bytes(make_fmap(np.ones((1, 2, 2))))
        bad = self._mutate_header(buf, lambda h: h.update(stride_px=16))
        with pytest.raises(HeaderParseError):
            load_fmap_bytes(bad)

    def test_nan_payload_rejected(self):
        fm = make_fmap(np.ones((1, 2, 2)))
        buf = dump_fmap_bytes(fm)
        bad = buf[:-4] + struct.pack("<f", float("nan"))
        with pytest.raises(NonFiniteValues):
            load_fmap_bytes(bad)

    @settings(max_examples=40, deadline=None)
    @given(
        d=st.integers(1, 4),
        h=st.integers(1, 5),
        w=st.integers(1, 5),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_write_load_write_bit_identical(self, d, h, w, seed):
        rng = np.random.default_rng(seed)
        values = rng.normal(size=(d, h, w)).astype(np.float32)
        fm = make_fmap(values)
        buf = dump_fmap_bytes(fm)
        again = dump_fmap_bytes(load_fmap_bytes(buf))
        assert buf == again

    def test_file_round_trip(self, tmp_path):
        fm = make_fmap(np.arange(12, dtype=np.float32).reshape(3, 2, 2))
        path = tmp_path / "x.fmap"
        write_fmap(fm, path)
        out = load_fmap(path)
        assert (out.values == fm.values).all()
        assert out.meta == fm.meta
        assert out.image_id == fm.image_id


class TestNormalize:
    def test_division_by_max_and_clamp(self):
        fm = make_fmap(np.array([[[8.0, 4.0], [-2.0, 0.0]]]))
        units = normalize_responses(fm, beta=1.0)
        fs = [u.f for u in units]
        ms = [u.mass for u in units]
        assert fs == [1.0, 0.5, -0.25, 0.0]
        assert ms == [1.0, 0.5, 0.0, 0.0]

    def test_all_nonpositive_yields_zero_mass(self):
        fm = make_fmap(np.array([[[-1.0, -3.0], [0.0, -0.5]]]))
        units = normalize_responses(fm)
        assert all(u.mass == 0.0 for u in units)
        # degenerate divisor is 1.0, so f stays the raw value
        assert units[0].f == -1.0

    def test_beta_scales_mass(self):
        fm = make_fmap(np.array([[[2.0, 1.0], [0.5, -1.0]]]))
        m1 = [u.mass for u in normalize_responses(fm, beta=1.0)]
        m3 = [u.mass for u in normalize_responses(fm, beta=3.0)]
        assert m3 == [3.0 * v for v in m1]

    def test_scaling_by_powers_of_two_is_exact(self, rng):
        raw = rng.normal(size=(2, 4, 4)).astype(np.float32)
        base = unit_grid(make_fmap(raw))
        for c in (2.0, 0.25, 64.0):
            scaled = unit_grid(make_fmap(raw * c))
            assert (scaled.mass == base.mass).all()
            assert (scaled.response == base.response).all()

    def test_positive_set_invariant_any_scale(self, rng):
        raw = rng.normal(size=(1, 5, 5)).astype(np.float32)
        base = unit_grid(make_fmap(raw))
        for c in (3.7, 0.013, 1e6):
            scaled = unit_grid(make_fmap((raw * c).astype(np.float32)))
            assert ((scaled.mass > 0) == (base.mass > 0)).all()
            order = np.argsort(base.mass[0], kind="stable")
            reordered = scaled.mass[0][order]
            assert (np.sort(reordered) == reordered).all()


class TestProjection:
    def test_first_unit(self):
        meta = make_meta(height=14, width=14, stride=16.0, image=224)
        u, v = project_position(0, 0, meta)
        assert u == pytest.approx(8.0 / 224.0, rel=1e-15)
        assert v == pytest.approx(8.0 / 224.0, rel=1e-15)

    def test_clamps_at_far_corner(self):
        meta = fmapio.LayerMeta(
            layer_id="l",
            depth=1,
            height=8,
            width=8,
            stride_px=32.0,
            offset_px=(0.0, 0.0),
            image_size_px=(224, 224),
        )
        assert project_position(7, 7, meta) == (1.0, 1.0)

    def test_center_unit(self):
        meta = make_meta(height=7, width=7, stride=32.0, image=224)
        assert project_position(3, 3, meta) == (0.5, 0.5)

    def test_out_of_range(self):
        meta = make_meta(height=4, width=4)
        with pytest.raises(IndexOutOfRange):
            project_position(4, 0, meta)
        with pytest.raises(IndexOutOfRange):
            project_position(0, -1, meta)

    def test_injective_on_in_image_grids(self, rng):
        for _ in range(20):
            h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            stride = float(rng.uniform(4.0, 16.0))
            meta = fmapio.LayerMeta(
                layer_id="l",
                depth=1,
                height=h,
                width=w,
                stride_px=stride,
                offset_px=(stride / 2, stride / 2),
                image_size_px=(int(stride * w) + 1, int(stride * h) + 1),
            )
            pts = {project_position(i, j, meta) for i in range(h) for j in range(w)}
            assert len(pts) == h * w


class TestManifest:
    def test_round_trip_and_load_set(self, tmp_path):
        fms = [
            make_fmap(np.ones((1, 2, 2)), image_id="a", layer_id="low"),
            make_fmap(np.ones((1, 3, 3)) * 2, image_id="a", layer_id="high"),
        ]
        entries = [{"image_id": "a", "layers": []}]
        for fm in fms:
            rel = f"a_{fm.meta.layer_id}.fmap"
            write_fmap(fm, tmp_path / rel)
            entries[0]["layers"].append({"layer_id": fm.meta.layer_id, "path": rel})
        write_manifest(entries, tmp_path / "manifest.json")
        loaded = load_manifest(tmp_path / "manifest.json")
        assert loaded == entries
        fs = load_feature_map_set(loaded[0], tmp_path)
        assert fs.image_id == "a"
        assert [m.meta.layer_id for m in fs.maps] == ["low", "high"]

    def test_layer_id_mismatch_rejected(self, tmp_path):
        fm = make_fmap(np.ones((1, 2, 2)), layer_id="low")
        write_fmap(fm, tmp_path / "x.fmap")
        entry = {"image_id": "a", "layers": [{"layer_id": "other", "path": "x.fmap"}]}
        with pytest.raises(SchemaError):
            load_feature_map_set(entry, tmp_path)

    def test_duplicate_layers_rejected(self):
        fm = make_fmap(np.ones((1, 2, 2)), layer_id="low")
        with pytest.raises(SchemaError):
            FeatureMapSet(image_id="a", maps=[fm, fm])
