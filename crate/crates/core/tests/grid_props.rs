use diffident::grid::{
    classify_voxels, read_dataset, sample_pde_points, write_dataset, Role, SnapshotSeries,
    VoxelMask,
};
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = VoxelMask> {
    (1usize..7, 1usize..7, 1usize..7)
        .prop_flat_map(|(a, b, c)| {
            (Just([a, b, c]), proptest::collection::vec(proptest::bool::weighted(0.7), a * b * c))
        })
        .prop_map(|(dims, occ)| VoxelMask::new(dims, 1.0, occ).unwrap())
}

/// Interior iff every neighbor along every axis with more than one voxel is occupied.
fn brute_force_interior(mask: &VoxelMask, i: usize, j: usize, k: usize) -> bool {
    let dims = mask.dims();
    let (i, j, k) = (i as isize, j as isize, k as isize);
    let offsets = [(1, 0, 0), (0, 1, 0), (0, 0, 1)];
    offsets.iter().enumerate().all(|(axis, &(di, dj, dk))| {
        dims[axis] == 1 || (mask.occupied(i + di, j + dj, k + dk) && mask.occupied(i - di, j - dj, k - dk))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interior_and_boundary_partition_the_mask(mask in mask_strategy()) {
        let Ok(domain) = classify_voxels(&mask) else {
            prop_assert_eq!(mask.occupied_count(), 0);
            return Ok(());
        };
        prop_assert_eq!(domain.interior().len() + domain.boundary().len(), mask.occupied_count());
        for (occ, &lin) in domain.occupied().iter().enumerate() {
            let [i, j, k] = mask.ijk(lin);
            let expect_interior = brute_force_interior(&mask, i, j, k);
            let role = domain.role(occ);
            prop_assert_eq!(matches!(role, Role::Interior(_)), expect_interior);
            match role {
                Role::Interior(p) => prop_assert_eq!(domain.interior()[p], occ),
                Role::Boundary(p) => prop_assert_eq!(domain.boundary()[p], occ),
            }
        }
    }

    #[test]
    fn latin_hypercube_strata_and_jitter(count in 1usize..400, seed in any::<u64>(), t_final in 1.0f64..100.0) {
        let domain = classify_voxels(&VoxelMask::ball(3, 1.0).unwrap()).unwrap();
        let pts = sample_pde_points(&domain, count, t_final, seed).unwrap();
        prop_assert_eq!(pts.len(), count);
        let width = t_final / count as f64;
        let mut hits = vec![0usize; count];
        for p in &pts {
            let s = ((p.t / width) as usize).min(count - 1);
            hits[s] += 1;
            prop_assert!(p.t >= 0.0 && p.t <= t_final);
            let near_interior = domain.interior().iter().any(|&o| {
                let c = domain.center(o);
                (0..3).all(|a| (p.x[a] - c[a]).abs() <= 0.5)
            });
            prop_assert!(near_interior);
        }
        prop_assert!(hits.iter().all(|&h| h == 1));
        prop_assert_eq!(pts, sample_pde_points(&domain, count, t_final, seed).unwrap());
    }

    #[test]
    fn dataset_round_trip_is_bit_exact(
        mask in mask_strategy(),
        raw in proptest::collection::vec(0.0f64..1.0, 1..3000),
        extra in 1usize..4,
    ) {
        let n = mask.occupied_count();
        prop_assume!(n > 0);
        let times: Vec<f64> = (0..=extra).map(|i| i as f64 * 7.5).collect();
        let values: Vec<Vec<f64>> = times
            .iter()
            .enumerate()
            .map(|(ti, _)| (0..n).map(|v| raw[(ti * n + v) % raw.len()] / 3.0).collect())
            .collect();
        let series = SnapshotSeries::new(times, values, 0.731).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &mask, &series).unwrap();
        let (mask2, series2) = read_dataset(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&mask2, &mask);
        for (a, b) in series.values().iter().flatten().zip(series2.values().iter().flatten()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(series.normalization().to_bits(), series2.normalization().to_bits());
        prop_assert_eq!(series.timepoints(), series2.timepoints());
    }
}
