import tempfile
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from tactsim.geometry import TriMesh, RigidTransform, IndenterShape, build_sensor_skin, build_core, \
    signed_distance, default_indenters, enclosed_volume, volume_gradient, shapes_from_config, shapes_to_config, \
    save_obj, load_obj, frame_from_direction, compose, invert


def coarse_skin(**kwargs):
    """
    Capsule skin at 2 mm resolution, small enough for quick checks.
    """
    kwargs.setdefault('resolution', 2e-3)
    return build_sensor_skin(strict=False, **kwargs)


def test_skin_is_closed_and_oriented():
    skin = coarse_skin()
    assert skin.is_closed
    assert skin.is_winding_consistent
    assert skin.euler_number == 2
    assert skin.edge_lengths().max() <= 2e-3 * (1 + 1e-9)
    assert enclosed_volume(skin) > 0


def test_skin_anchors():
    skin = coarse_skin()
    coords = skin.ref_coords
    expected = (coords[:, 0] <= 1e-12) | (coords[:, 2] >= 0.5 * 6.7e-3 - 1e-12)
    np.testing.assert_array_equal(skin.anchored, expected)
    # the ventral half of the cylinder stays free
    ventral = (coords[:, 2] < 0) & (coords[:, 0] > 0)
    assert not skin.anchored[ventral].any()


def test_skin_is_mirror_symmetric():
    skin = coarse_skin()
    mirrored = skin.ref_coords * [1.0, -1.0, 1.0]
    distances = np.linalg.norm(mirrored[:, None, :] - skin.ref_coords[None, :, :], axis=2).min(axis=1)
    assert distances.max() < 1e-12


def test_strict_resolution():
    try:
        build_sensor_skin(resolution=1e-3, strict=True)
    except ValueError:
        pass
    else:
        raise AssertionError('coarse resolution accepted in strict mode')


def test_sphere_volume():
    radius = 5e-3
    skin = build_sensor_skin(radius=radius, cyl_length=0.0, resolution=1e-3, strict=False)
    exact = 4.0 / 3.0 * np.pi * radius ** 3
    assert abs(enclosed_volume(skin) - exact) / exact < 0.02


def test_capsule_volume_converges():
    radius, length = 6.7e-3, 8e-3
    exact = 4.0 / 3.0 * np.pi * radius ** 3 + np.pi * radius ** 2 * length
    errors = [abs(enclosed_volume(coarse_skin(resolution=r)) - exact) / exact for r in (2e-3, 1e-3)]
    assert errors[1] < errors[0] < 0.05


def test_volume_is_translation_invariant():
    skin = coarse_skin()
    moved = skin.with_coords(skin.cur_coords + [0.3, -2.0, 1.5])
    assert abs(enclosed_volume(moved) - enclosed_volume(skin)) < 1e-12 * enclosed_volume(skin)


def test_volume_gradient():
    skin = coarse_skin()
    rng = np.random.default_rng(0)
    coords = skin.ref_coords * 1.02 + rng.normal(0.0, 5e-5, skin.ref_coords.shape)
    gradient = volume_gradient(coords, skin.triangles)
    step = 1e-7
    for dof in rng.choice(coords.size, size=30, replace=False):
        plus, minus = coords.copy(), coords.copy()
        plus.reshape(-1)[dof] += step
        minus.reshape(-1)[dof] -= step
        numeric = (enclosed_volume(skin.with_coords(plus)) - enclosed_volume(skin.with_coords(minus))) / (2 * step)
        assert abs(numeric - gradient.reshape(-1)[dof]) <= 1e-5 * np.abs(gradient).max()


def test_open_mesh_volume_raises():
    skin = coarse_skin()
    opened = TriMesh.from_coords(skin.ref_coords, skin.triangles[1:], skin.anchored)
    assert not opened.is_closed
    try:
        enclosed_volume(opened)
    except ValueError:
        pass
    else:
        raise AssertionError('volume of an open mesh')


def test_mesh_arrays_are_frozen():
    skin = coarse_skin()
    try:
        skin.cur_coords[0, 0] = 1.0
    except ValueError:
        pass
    else:
        raise AssertionError('mesh coordinates are writable')


def test_rigid_transform():
    rotation = Rotation.from_euler('xyz', [0.3, -1.1, 2.0]).as_matrix()
    transform = RigidTransform(rotation, [1e-3, 2e-3, -5e-3])
    points = np.random.default_rng(1).normal(size=(10, 3))

    np.testing.assert_allclose(transform.inverse().apply(transform.apply(points)), points, atol=1e-12)
    np.testing.assert_allclose((transform @ transform.inverse()).as_matrix(), np.eye(4), atol=1e-12)
    recovered = RigidTransform.from_quaternion(transform.as_quaternion(), transform.translation)
    np.testing.assert_allclose(recovered.as_matrix(), transform.as_matrix(), atol=1e-12)
    np.testing.assert_allclose(RigidTransform.from_dict(transform.to_dict()).as_matrix(), transform.as_matrix(),
                               atol=1e-12)
    np.testing.assert_allclose(transform.apply_vector([0.0, 0.0, 1.0]), rotation[:, 2])


def test_compose_and_invert():
    transform = RigidTransform(Rotation.from_rotvec([0.4, 0.2, -0.9]).as_matrix(), [0.1, -0.2, 0.3])
    np.testing.assert_allclose(compose(RigidTransform.identity(), transform).as_matrix(), transform.as_matrix(),
                               atol=1e-15)

    quarter = RigidTransform(Rotation.from_euler('z', 90.0, degrees=True).as_matrix(), np.zeros(3))
    full = compose(compose(quarter, quarter), compose(quarter, quarter))
    np.testing.assert_allclose(full.as_matrix(), np.eye(4), atol=1e-12)

    points = np.random.default_rng(2).uniform(-1.0, 1.0, size=(100, 3))
    moved = compose(transform, invert(transform)).apply(points)
    assert np.abs(moved - points).max() < 1e-12


def test_rigid_transform_rejects_non_rotations():
    for matrix in (np.diag([1.0, 1.0, 2.0]), np.diag([1.0, 1.0, -1.0])):
        try:
            RigidTransform(matrix, np.zeros(3))
        except ValueError:
            continue
        raise AssertionError('accepted {}'.format(matrix.tolist()))


def test_frame_from_direction():
    for direction in ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.3, -0.4, 0.5]):
        frame = frame_from_direction(direction)
        np.testing.assert_allclose(frame.T @ frame, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(frame[:, 2], np.asarray(direction) / np.linalg.norm(direction), atol=1e-12)
        assert abs(np.linalg.det(frame) - 1.0) < 1e-12


def test_sphere_distance():
    sphere = IndenterShape('sphere', (2e-3,))
    distance, gradient = signed_distance(sphere, [0.0, 0.0, 5e-3])
    assert abs(distance - 3e-3) < 1e-15
    np.testing.assert_allclose(gradient, [0.0, 0.0, 1.0])
    assert abs(signed_distance(sphere, [0.0, 0.0, 0.0])[0] + 2e-3) < 1e-15


def test_cube_distance():
    cube = IndenterShape('cube', (4e-3,))
    assert abs(signed_distance(cube, [4e-3, 0.0, 0.0])[0] - 2e-3) < 1e-15
    assert abs(signed_distance(cube, [0.0, 0.0, 0.0])[0] + 2e-3) < 1e-15
    distance, gradient = signed_distance(cube, [3e-3, 3e-3, 0.0])
    assert abs(distance - np.sqrt(2.0) * 1e-3) < 1e-15
    np.testing.assert_allclose(gradient, [np.sqrt(0.5), np.sqrt(0.5), 0.0])


def test_torus_distance():
    ring = IndenterShape('ring', (3e-3, 1e-3))
    assert abs(signed_distance(ring, [3e-3, 0.0, 0.0])[0] + 1e-3) < 1e-15
    assert abs(signed_distance(ring, [0.0, 0.0, 0.0])[0] - 2e-3) < 1e-15
    assert abs(signed_distance(ring, [0.0, 3e-3, 2e-3])[0] - 1e-3) < 1e-15


def test_distance_gradient_is_unit():
    rng = np.random.default_rng(2)
    points = rng.uniform(-1.5e-2, 1.5e-2, size=(200, 3))
    for shape in default_indenters().values():
        _, gradient = shape.signed_distance(points)
        np.testing.assert_allclose(np.linalg.norm(gradient, axis=1), 1.0, atol=1e-9)


def test_distance_is_pose_invariant():
    rng = np.random.default_rng(3)
    pose = RigidTransform(Rotation.from_rotvec([0.4, -0.2, 1.3]).as_matrix(), [1e-3, -4e-3, 2e-3])
    local = rng.uniform(-1e-2, 1e-2, size=(50, 3))
    for shape in default_indenters().values():
        expected, expected_gradient = shape.local_signed_distance(local)
        distance, gradient = shape.with_pose(pose).signed_distance(pose.apply(local))
        np.testing.assert_allclose(distance, expected, atol=1e-15)
        np.testing.assert_allclose(gradient, pose.apply_vector(expected_gradient), atol=1e-12)


def test_tip_lies_on_the_surface():
    for shape in default_indenters().values():
        x = shape.dimensions[0] if shape.kind.value == 'ring' else 0.0
        assert abs(shape.local_signed_distance([[x, 0.0, shape.tip_offset]])[0][0]) < 1e-15
        assert shape.local_signed_distance([[x, 0.0, shape.tip_offset + 1e-4]])[0][0] > 0
        assert shape.bounding_radius >= shape.tip_offset


def test_tip_offset_and_bounding_radius():
    expected = {'sphere_small': 3.5e-3, 'sphere_medium': 7e-3, 'sphere_large': 14e-3}
    rng = np.random.default_rng(3)
    for name, shape in default_indenters().items():
        if name in expected:
            assert shape.tip_offset == expected[name]
            assert shape.bounding_radius == expected[name]
        # every interior point lies inside the bounding ball
        extent = 1.5 * shape.bounding_radius
        samples = rng.uniform(-extent, extent, size=(20000, 3))
        distance = shape.local_signed_distance(samples)[0]
        inside = samples[distance <= 0]
        assert len(inside) > 0
        assert np.linalg.norm(inside, axis=1).max() <= shape.bounding_radius * (1 + 1e-12)
        # nothing of the indenter leads its tip along +z
        assert inside[:, 2].max() <= shape.tip_offset * (1 + 1e-12)


def test_box_ties_pick_the_smallest_normal():
    cube = IndenterShape('cube', (2e-3,))
    points = [[1e-3, 1e-3, 1e-3],      # corner with positive faces only
              [1e-3, -1e-3, 1e-3],     # corner with a negative face
              [-1e-3, 1e-3, 0.5e-3],   # edge
              [0.0, 0.0, 0.0]]         # centre, all faces tied
    expected = [[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
    distance, gradient = cube.local_signed_distance(points)
    np.testing.assert_allclose(distance, [0.0, 0.0, 0.0, -1e-3], atol=1e-18)
    np.testing.assert_array_equal(gradient, expected)

    # off the ties the nearest face wins
    distance, gradient = cube.local_signed_distance([[0.9e-3, 0.2e-3, -0.1e-3]])
    np.testing.assert_array_equal(gradient, [[1.0, 0.0, 0.0]])

    # the leading ridge of the edge indenter is shared by two faces
    edge = default_indenters()['edge']
    gradient = edge.local_signed_distance([[0.0, 0.0, edge.tip_offset - 1e-6]])[1][0]
    candidates = np.array([[0.0, -1.0, 1.0], [0.0, 1.0, 1.0]]) / np.sqrt(2.0)
    np.testing.assert_allclose(gradient, candidates[0], atol=1e-12)


def test_invalid_shapes():
    for kind, dimensions in (('sphere', (-1e-3,)), ('cube', (1e-3, 2e-3)), ('ring', (1e-3, 2e-3)), ('cone', (1.0,))):
        try:
            IndenterShape(kind, dimensions)
        except ValueError:
            continue
        raise AssertionError('accepted {} {}'.format(kind, dimensions))


def test_default_indenters():
    shapes = default_indenters()
    assert len(shapes) == 7
    assert set(shapes) == {'sphere_small', 'sphere_medium', 'sphere_large', 'flat_cylinder', 'cube', 'ring', 'edge'}
    radii = [shapes[name].dimensions[0] for name in ('sphere_small', 'sphere_medium', 'sphere_large')]
    np.testing.assert_allclose(radii, [3.5e-3, 7e-3, 14e-3])


def test_shape_config():
    pose = RigidTransform(Rotation.from_rotvec([0.0, 0.5, 0.0]).as_matrix(), [0.0, 1e-3, 0.0])
    shapes = [shape.with_pose(pose) for shape in default_indenters().values()]
    with tempfile.TemporaryDirectory() as tmp:
        filepath = Path(tmp) / 'shapes.json'
        shapes_to_config(shapes, filepath)
        loaded = shapes_from_config(filepath)
    assert list(loaded) == [shape.name for shape in shapes]
    for shape in shapes:
        other = loaded[shape.name]
        assert other.kind == shape.kind
        assert other.dimensions == shape.dimensions
        np.testing.assert_allclose(other.pose.as_matrix(), shape.pose.as_matrix(), atol=1e-12)


def test_core_surface():
    core = build_core()
    assert abs(core.radius - 5.7e-3) < 1e-15
    distance, _ = core.signed_distance(core.mesh.ref_coords)
    assert np.abs(distance).max() < 1e-12
    assert core.signed_distance([[4e-3, 0.0, 0.0]])[0][0] < 0
    projected = core.project(np.array([[4e-3, 0.0, -9e-3], [-9e-3, 0.0, 0.0]]))
    np.testing.assert_allclose(projected, [[4e-3, 0.0, -5.7e-3], [-5.7e-3, 0.0, 0.0]], atol=1e-15)


def test_core_fits_inside_skin():
    skin = coarse_skin()
    core = build_core()
    assert core.signed_distance(skin.ref_coords)[0].min() > 0.9e-3
    assert enclosed_volume(core.mesh) < enclosed_volume(skin)


def test_obj_io():
    skin = coarse_skin()
    with tempfile.TemporaryDirectory() as tmp:
        filepath = Path(tmp) / 'mesh' / 'skin.obj'
        save_obj(skin, filepath)
        loaded = load_obj(filepath, skin.anchored)
    assert loaded.num_nodes == skin.num_nodes
    assert loaded.num_triangles == skin.num_triangles
    assert loaded.is_closed
    assert abs(enclosed_volume(loaded) - enclosed_volume(skin)) < 1e-4 * enclosed_volume(skin)


def test_sha256():
    skin = coarse_skin()
    assert skin.sha256() == coarse_skin().sha256()
    assert skin.sha256() != coarse_skin(resolution=1.5e-3).sha256()
    assert skin.sha256() == skin.with_coords(skin.cur_coords * 1.1).sha256()


if __name__ == '__main__':
    for name, function in list(globals().items()):
        if name.startswith('test_') and callable(function):
            function()
