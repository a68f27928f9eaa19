mod common;

#[test]
fn analytic_sphere_depths_fuse_to_a_closed_accurate_mesh() {
    let run = common::sphere_mesh(false);
    println!("{:?}", run.score);
    assert!(run.score.f1 >= 0.95, "{:?}", run.score);
    assert!(
        run.mesh.is_watertight(),
        "{} boundary edges",
        run.mesh.boundary_edge_count()
    );
}

#[test]
fn rendered_sphere_depths_fuse_to_a_closed_accurate_mesh() {
    let run = common::sphere_mesh(true);
    println!("{:?}", run.score);
    assert!(run.score.f1 >= 0.95, "{:?}", run.score);
    assert!(
        run.mesh.is_watertight(),
        "{} boundary edges",
        run.mesh.boundary_edge_count()
    );
}
