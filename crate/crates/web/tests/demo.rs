use std::collections::HashSet;

use dauhst_web::{attention_groups, group_members, Demo};

#[test]
fn projection_rounds_beat_the_adjoint_baseline() {
    let mut demo = Demo::build(32, 8, 1, 0.5, 4).unwrap();
    let base = demo.baseline().unwrap();
    let zero_rounds = demo.run_projection(0.1, 0.6, 0).unwrap();
    assert_eq!(zero_rounds, base);
    let p = demo.run_projection(0.1, 0.6, 10).unwrap();
    assert!(p > base, "{p} vs {base}");
    assert_eq!(demo.reconstruction().dims(), (32, 32, 8));
    assert!(demo.run_projection(0.0, 0.5, 3).is_err());
    assert!(demo.run_projection(1.0, 1.5, 3).is_err());
}

#[test]
fn images_have_rgba_sizes() {
    let demo = Demo::build(16, 4, 2, 0.5, 0).unwrap();
    assert_eq!(demo.measurement_width(), 16 + 2 * 3);
    assert_eq!(demo.measurement_image().len(), 16 * 22 * 4);
    assert_eq!(demo.mask_image().len(), 16 * 16 * 4);
    assert_eq!(demo.scene_band(3).unwrap().len(), 16 * 16 * 4);
}

#[test]
fn groups_partition_the_map_two_ways() {
    let (size, m) = (8, 4);
    let mut local_groups = HashSet::new();
    let mut nonlocal_groups = HashSet::new();
    for r in 0..size {
        for c in 0..size {
            let (local, nonlocal) = group_members(size, m, r, c).unwrap();
            let me = r * size + c;
            assert_eq!(local.len(), m * m);
            assert_eq!(nonlocal.len(), (size / m) * (size / m));
            assert!(local.contains(&me) && nonlocal.contains(&me));
            // the local group is the aligned window around the pixel
            assert!(local
                .iter()
                .all(|&i| i / size / m == r / m && i % size / m == c / m));
            // the shuffled group has the same offset inside every window
            assert!(nonlocal
                .iter()
                .all(|&i| (i / size) % m == r % m && (i % size) % m == c % m));
            local_groups.insert(local);
            nonlocal_groups.insert(nonlocal);
        }
    }
    assert_eq!(local_groups.len(), (size / m) * (size / m));
    assert_eq!(nonlocal_groups.len(), m * m);
    assert_eq!(attention_groups(size, m, 1, 2).unwrap().len(), size * size * 4);
    assert!(group_members(size, 3, 0, 0).is_err());
    assert!(group_members(size, m, size, 0).is_err());
}
