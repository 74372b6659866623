use nalgebra::DVector;
use oceanflow::basis::{build, full_rank, BasisModel, Variant};
use oceanflow::ensemble::{generate_synthetic_ensemble, LatentFitter, LatentSet, SynthConfig};
use oceanflow::estimator::{init_kf, noise_free_r, noisy_r, reconstruct_grid, span_bound, EstimatorState};
use oceanflow::flowgrid::flowpack::{decode_value, ensemble_to_flowpack, field_to_flowpack, Flowpack, FlowpackValue};
use oceanflow::metrics::rmse;
use oceanflow::sensing::{generate_campaign, grid_point_campaign, AdcpConfig, MeasurementSet};
use oceanflow::{build_grid, EnsembleForecast, Grid3D, GriddedField};

struct Setup {
    ensemble: EnsembleForecast,
    truth: GriddedField,
    latents: LatentSet,
}

fn desk_grid() -> Grid3D {
    build_grid((0.0, 70_000.0), (0.0, 70_000.0), (2.5, 685.0), 8, 8, 4).unwrap()
}

fn setup(seed: u64) -> Setup {
    let grid = desk_grid();
    let synth = SynthConfig { seed, outlier_member: true, ..SynthConfig::default() };
    let s = generate_synthetic_ensemble(&grid, &synth).unwrap();
    let kernel = oceanflow::KernelConfig::new(1e4, 1e4, 200.0, 1.0)
        .unwrap()
        .with_mean_speed(s.ensemble.mean_surface_speed());
    let fitter = LatentFitter::new(grid, kernel, 1e-8).unwrap();
    let fits = fitter.fit_ensemble(&s.ensemble).unwrap();
    let latents = LatentSet::from_fits(grid, kernel, &fits).unwrap();
    Setup { ensemble: s.ensemble, truth: s.truth.unwrap(), latents }
}

fn model(s: &Setup, variant: Variant) -> BasisModel {
    let r = full_rank(variant, &s.latents.grid, s.latents.n_members());
    build(variant, &s.latents.b, &s.latents.grid, &s.latents.kernel, r).unwrap()
}

fn estimate(m: &BasisModel, meas: &MeasurementSet, r: nalgebra::Matrix2<f64>) -> EstimatorState {
    let mut st = init_kf(m, r).unwrap();
    st.batch_update(m, meas).unwrap();
    st
}

#[test]
fn desk_bounds_are_frozen() {
    let s = setup(0);
    let naive = span_bound(&model(&s, Variant::Naive3D), &s.truth).unwrap().rmse;
    let layered = span_bound(&model(&s, Variant::Layered25D), &s.truth).unwrap().rmse;
    assert!((naive - 9.6575).abs() < 1e-3, "naive bound {naive}");
    assert!((layered - 1.4403).abs() < 1e-3, "layered bound {layered}");
}

#[test]
fn member_in_span_is_recovered() {
    let s = setup(2);
    let member = &s.ensemble.members()[3];
    let m = model(&s, Variant::Naive3D);
    let bound = span_bound(&m, member).unwrap().rmse;
    // The kernel fit residual is the only thing separating a member from the span.
    assert!(bound < 0.5, "bound {bound}");
    let st = estimate(&m, &grid_point_campaign(member), noise_free_r());
    let err = rmse(&reconstruct_grid(&m, &st.w).unwrap(), member).unwrap();
    assert!(err < bound + 0.5, "rmse {err} vs bound {bound}");
}

#[test]
fn more_measurements_help() {
    let s = setup(5);
    let m = model(&s, Variant::Layered25D);
    let prior = init_kf(&m, noisy_r()).unwrap();
    let prior_err = rmse(&reconstruct_grid(&m, &prior.w).unwrap(), &s.truth).unwrap();
    let adcp = AdcpConfig { noise_std: 0.09, ..AdcpConfig::default() };
    let few = generate_campaign(&s.truth, 20, &adcp, 1).unwrap();
    let many = generate_campaign(&s.truth, 400, &adcp, 1).unwrap();
    let err = |meas: &MeasurementSet| {
        let st = estimate(&m, meas, noisy_r());
        rmse(&reconstruct_grid(&m, &st.w).unwrap(), &s.truth).unwrap()
    };
    let (e_few, e_many) = (err(&few), err(&many));
    assert!(e_few < prior_err, "{e_few} vs prior {prior_err}");
    assert!(e_many < e_few, "{e_many} vs {e_few}");
}

fn through_file(pack: &Flowpack, name: &str) -> Flowpack {
    let path = std::env::temp_dir().join(format!("oceanflow-it-{}-{name}.flowpack", std::process::id()));
    pack.save(&path).unwrap();
    let back = Flowpack::load(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    back
}

#[test]
fn artifacts_survive_disk() {
    let s = setup(1);
    match decode_value(&through_file(&ensemble_to_flowpack(&s.ensemble), "ens")).unwrap() {
        FlowpackValue::Ensemble(e) => assert_eq!(e, s.ensemble),
        _ => panic!("expected an ensemble"),
    }
    match decode_value(&through_file(&field_to_flowpack(&s.truth), "truth")).unwrap() {
        FlowpackValue::Field(f) => assert_eq!(f, s.truth),
        _ => panic!("expected a field"),
    }
    assert_eq!(LatentSet::from_flowpack(&through_file(&s.latents.to_flowpack(), "lat")).unwrap(), s.latents);

    let m = model(&s, Variant::Layered25D);
    let m2 = BasisModel::from_flowpack(&through_file(&m.to_flowpack(), "basis")).unwrap();
    assert_eq!(m2, m);

    let meas = generate_campaign(&s.truth, 10, &AdcpConfig::default(), 9).unwrap();
    let meas2 = MeasurementSet::from_flowpack(&through_file(&meas.to_flowpack(), "meas")).unwrap();
    assert_eq!(meas2, meas);

    let st = estimate(&m, &meas, noisy_r());
    let st2 = EstimatorState::from_flowpack(&through_file(&st.to_flowpack(), "state")).unwrap();
    assert_eq!(st2.w, st.w);
    assert_eq!(st2.p, st.p);

    // A restored filter keeps assimilating identically.
    let extra = generate_campaign(&s.truth, 3, &AdcpConfig::default(), 10).unwrap();
    let (mut a, mut b) = (st, st2);
    a.batch_update(&m, &extra).unwrap();
    b.batch_update(&m2, &extra).unwrap();
    assert_eq!(a.w, b.w);
}

#[test]
fn estimates_are_deterministic() {
    let a = setup(6);
    let b = setup(6);
    assert_eq!(a.ensemble, b.ensemble);
    let m = model(&a, Variant::Layered25D);
    let meas = generate_campaign(&a.truth, 30, &AdcpConfig::default(), 2).unwrap();
    let w1: DVector<f64> = estimate(&m, &meas, noisy_r()).w;
    let w2: DVector<f64> = estimate(&m, &meas, noisy_r()).w;
    assert_eq!(w1, w2);
}
