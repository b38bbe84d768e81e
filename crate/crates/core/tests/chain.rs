use proptest::prelude::*;
use rocksr_core::metrics::{psnr, ssim, SsimParams};
use rocksr_core::porosity::{dykstra_parsons, local_porosity_map, porosity_summary, BlockPorosity};
use rocksr_core::prep::{histogram_match, normalize_u16_to_u8};
use rocksr_core::segment::{select_optimal_thresholds, watershed_segment, ThresholdConfig};
use rocksr_core::synth::{sphere_pack, SpherePackConfig};
use rocksr_core::volume::{crop, load_raw, pad, save_raw};
use rocksr_core::{BitDepth, Region, VoxelGrid};

fn grid_from(dims: [usize; 3], data: Vec<u16>) -> VoxelGrid {
    VoxelGrid::new(dims, 1.0, BitDepth::U8, data).unwrap()
}

#[test]
fn raw_round_trip_preserves_grid() {
    let dir = tempfile::tempdir().unwrap();
    let g = VoxelGrid::from_fn([5, 4, 3], 2.5, BitDepth::U16, |x, y, z| (x * 1000 + y * 97 + z * 13) as u16).unwrap();
    let (raw, meta) = (dir.path().join("v.raw"), dir.path().join("v.meta"));
    save_raw(&g, &raw, &meta).unwrap();
    let back = load_raw(&raw, &meta).unwrap();
    assert_eq!(back, g);
}

#[test]
fn psnr_of_constant_offset_is_analytic() {
    let a = grid_from([12; 3], vec![100; 1728]);
    let b = grid_from([12; 3], vec![104; 1728]);
    let want = 20.0 * (255.0f64 / 4.0).log10();
    assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-12);
    assert!(psnr(&a, &a).unwrap().is_infinite());
    assert!((ssim(&a, &a, SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn sphere_pack_chain_recovers_macro_porosity() {
    let rock = sphere_pack(&SpherePackConfig {
        dims: [48; 3],
        noise_sigma: 3.0,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let sel = select_optimal_thresholds(&rock.grid, &ThresholdConfig::default()).unwrap();
    let t = sel.thresholds;
    assert!(40 < t.pore_max && t.pore_max < t.grain_min && t.grain_min < 200, "{t:?}");
    let labels = watershed_segment(&rock.grid, &t).unwrap();
    let pmap = local_porosity_map(&rock.grid, &labels, &t).unwrap();
    let s = porosity_summary(&labels, &pmap).unwrap();
    assert!((s.macro_porosity - rock.macro_porosity).abs() < 0.01, "{} vs {}", s.macro_porosity, rock.macro_porosity);
    assert!(s.total >= s.macro_porosity);
    let curve = dykstra_parsons(&labels, &pmap, &[4, 8, 16], BlockPorosity::Combined).unwrap();
    for p in curve {
        // all-grain blocks at zero porosity can pin the lower quantile to 0
        let v = p.coefficient.unwrap();
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
}

#[test]
fn normalize_then_match_to_self_is_identity() {
    let g = VoxelGrid::from_fn([16, 16, 4], 1.0, BitDepth::U16, |x, y, z| (x * 3000 + y * 700 + z * 50) as u16).unwrap();
    let (n, _) = normalize_u16_to_u8(&g, 0.0).unwrap();
    assert_eq!(n.depth(), BitDepth::U8);
    assert_eq!(histogram_match(&n, &n).unwrap(), n);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_inverts_pad(
        dims in prop::array::uniform3(1usize..6),
        before in prop::array::uniform3(0usize..3),
        after in prop::array::uniform3(0usize..3),
        seed in any::<u16>(),
    ) {
        let g = VoxelGrid::from_fn(dims, 1.0, BitDepth::U16, |x, y, z| seed.wrapping_add((x + 7 * y + 31 * z) as u16)).unwrap();
        let p = pad(&g, before, after, 9).unwrap();
        prop_assert_eq!(p.dims(), [0, 1, 2].map(|a| dims[a] + before[a] + after[a]));
        prop_assert_eq!(crop(&p, Region::new(before, dims)).unwrap(), g);
    }
}
