//! C ABI over the core toolkit.
//!
//! Conventions:
//! - Handles (`StadvDataset`, `StadvModel`) are opaque pointers owned by this
//!   library; free them with the matching `*_free` function exactly once.
//! - Every fallible function returns a [`StadvStatus`]; on any non-OK status
//!   the thread-local message from [`stadv_last_error`] describes the
//!   failure. Output parameters are written only on `Ok`.
//! - No function unwinds across the boundary; panics surface as
//!   `STADV_STATUS_RUNTIME`.
//!
//! The matching declarations live in `include/stadv.h`.

use libc::{c_char, c_double};
use stadv_core::attack::{AttackConfig, Method, Selector, Setting};
use stadv_core::data::{
    chronological_split, generate_synthetic, parse_graph_csv, parse_speed_csv, DatasetSplit,
    Normalizer, SpeedSeries, TrafficNetwork,
};
use stadv_core::experiment::{clean_g_mae, evaluate_attack};
use stadv_core::forecaster::{train_schedule, ModelConfig, StModel, TrainConfig};
use stadv_core::rng::SeedStream;
use stadv_core::tape::Activation;
use stadv_core::StadvError;
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StadvStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Runtime = 4,
    BoundViolation = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &StadvError) -> StadvStatus {
    match err {
        StadvError::Io(_) => StadvStatus::Io,
        StadvError::InvalidArgument(_) | StadvError::ShapeMismatch { .. } => {
            StadvStatus::InvalidArgument
        }
        StadvError::BoundViolation { .. } => StadvStatus::BoundViolation,
        _ => StadvStatus::Runtime,
    }
}

fn fail(err: StadvError) -> StadvStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

fn guard(body: impl FnOnce() -> StadvStatus) -> StadvStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in stadv".to_string());
            set_error(&msg);
            StadvStatus::Runtime
        }
    }
}

/// Loaded traffic data: sensor graph plus raw speed series.
pub struct StadvDataset {
    graph: TrafficNetwork,
    series: SpeedSeries,
}

impl StadvDataset {
    fn split_for(&self, t: usize, tau: usize) -> Result<DatasetSplit, StadvError> {
        let (_, normalizer) = stadv_core::data::normalize(&self.series)?;
        let windows =
            stadv_core::data::make_windows(&self.series, &self.graph, &normalizer, t, tau)?;
        chronological_split(windows, normalizer)
    }
}

/// A trained forecaster with the normalizer its data pipeline produced.
pub struct StadvModel {
    model: StModel,
    normalizer: Normalizer,
    defense: String,
}

/// Attack request. `method`: 0 stpgd, 1 stmim. `selector`: 0 tdns, 1 random,
/// 2 degree, 3 betweenness, 4 pagerank. `setting`: 0 grey, 1 white, 2 black.
/// `max_windows = 0` evaluates the whole test split.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct StadvAttackParams {
    pub epsilon: c_double,
    pub alpha: c_double,
    pub iters: u32,
    pub eta: u32,
    pub method: u32,
    pub selector: u32,
    pub setting: u32,
    pub momentum: c_double,
    pub seed: u64,
    pub max_windows: u32,
    pub batch: u32,
    pub domain_clip: u32,
}

/// Attack-effect metrics in raw speed units.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct StadvMetrics {
    pub g_mae: c_double,
    pub l_mae: c_double,
    pub g_rmse: c_double,
    pub l_rmse: c_double,
    pub clean_g_mae: c_double,
    pub degradation_pct: c_double,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, StadvStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(StadvStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        StadvStatus::InvalidArgument
    })
}

macro_rules! nonnull {
    ($ptr:expr, $name:literal) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                set_error(concat!("null argument: ", $name));
                return StadvStatus::NullArgument;
            }
        }
    };
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn stadv_version() -> *const c_char {
    static VERSION: &[u8] = b"0.1.0\0";
    VERSION.as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. Borrowed;
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stadv_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Generate a synthetic dataset (random geometric sensor graph + diurnal
/// speeds). The handle must be released with `stadv_dataset_free`.
#[no_mangle]
pub extern "C" fn stadv_dataset_generate(
    nodes: u32,
    steps: u32,
    seed: u64,
    out: *mut *mut StadvDataset,
) -> StadvStatus {
    guard(|| {
        if out.is_null() {
            set_error("null argument: out");
            return StadvStatus::NullArgument;
        }
        match generate_synthetic(nodes as usize, steps as usize, seed) {
            Ok((graph, series)) => {
                let handle = Box::new(StadvDataset { graph, series });
                unsafe { *out = Box::into_raw(handle) };
                StadvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Load a dataset from speed and graph CSV files.
#[no_mangle]
pub extern "C" fn stadv_dataset_load(
    speed_csv_path: *const c_char,
    graph_csv_path: *const c_char,
    out: *mut *mut StadvDataset,
) -> StadvStatus {
    guard(|| {
        if out.is_null() {
            set_error("null argument: out");
            return StadvStatus::NullArgument;
        }
        let speed_path = match unsafe { cstr(speed_csv_path) } {
            Ok(s) => s,
            Err(code) => return code,
        };
        let graph_path = match unsafe { cstr(graph_csv_path) } {
            Ok(s) => s,
            Err(code) => return code,
        };
        let load = || -> Result<StadvDataset, StadvError> {
            let speed_text = std::fs::read_to_string(speed_path)?;
            let series = parse_speed_csv(&speed_text)?;
            let graph_text = std::fs::read_to_string(graph_path)?;
            let graph = parse_graph_csv(&graph_text, series.node_count())?;
            Ok(StadvDataset { graph, series })
        };
        match load() {
            Ok(ds) => {
                unsafe { *out = Box::into_raw(Box::new(ds)) };
                StadvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub extern "C" fn stadv_dataset_nodes(dataset: *const StadvDataset) -> u32 {
    unsafe { dataset.as_ref() }
        .map(|d| d.graph.node_count() as u32)
        .unwrap_or(0)
}

#[no_mangle]
pub extern "C" fn stadv_dataset_steps(dataset: *const StadvDataset) -> u32 {
    unsafe { dataset.as_ref() }
        .map(|d| d.series.steps() as u32)
        .unwrap_or(0)
}

/// # Safety
/// `dataset` must be a pointer returned by a `stadv_dataset_*` constructor,
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stadv_dataset_free(dataset: *mut StadvDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Train a forecaster on the dataset's chronological split with the default
/// architecture for its node count and a coarse+fine fixed-step schedule.
/// `fine_epochs = 0` disables the second phase.
#[no_mangle]
pub extern "C" fn stadv_model_train(
    dataset: *const StadvDataset,
    t_in: u32,
    horizon: u32,
    epochs: u32,
    learning_rate: c_double,
    fine_epochs: u32,
    fine_learning_rate: c_double,
    seed: u64,
    out: *mut *mut StadvModel,
) -> StadvStatus {
    guard(|| {
        let ds = nonnull!(dataset, "dataset");
        if out.is_null() {
            set_error("null argument: out");
            return StadvStatus::NullArgument;
        }
        let run = || -> Result<StadvModel, StadvError> {
            let split = ds.split_for(t_in as usize, horizon as usize)?;
            let mut cfg = ModelConfig::for_nodes(ds.graph.node_count());
            cfg.t_in = t_in as usize;
            cfg.horizon = horizon as usize;
            // Shrink the dilated conv stack until its longest shift fits the
            // window.
            while cfg.temporal_layers > 1 && 2 * (1 << (cfg.temporal_layers - 1)) >= cfg.t_in {
                cfg.temporal_layers -= 1;
            }
            let mut model = StModel::init(
                cfg,
                &ds.graph,
                &mut SeedStream::new(seed).stream("init"),
            )?;
            let mut phases = vec![TrainConfig {
                epochs: epochs as usize,
                learning_rate,
                batch_size: 64,
                seed,
            }];
            if fine_epochs > 0 {
                phases.push(TrainConfig {
                    epochs: fine_epochs as usize,
                    learning_rate: fine_learning_rate,
                    batch_size: 64,
                    seed,
                });
            }
            train_schedule(&mut model, &split, &phases)?;
            Ok(StadvModel {
                model,
                normalizer: split.normalizer,
                defense: "none".to_string(),
            })
        };
        match run() {
            Ok(m) => {
                unsafe { *out = Box::into_raw(Box::new(m)) };
                StadvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Save a model checkpoint in the STADV1 text format.
#[no_mangle]
pub extern "C" fn stadv_model_save(
    model: *const StadvModel,
    path: *const c_char,
) -> StadvStatus {
    guard(|| {
        let m = nonnull!(model, "model");
        let path = match unsafe { cstr(path) } {
            Ok(s) => s,
            Err(code) => return code,
        };
        match stadv_core::checkpoint::save_model(path, &m.model, &m.normalizer, &m.defense) {
            Ok(()) => StadvStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Load a model checkpoint.
#[no_mangle]
pub extern "C" fn stadv_model_load(
    path: *const c_char,
    out: *mut *mut StadvModel,
) -> StadvStatus {
    guard(|| {
        if out.is_null() {
            set_error("null argument: out");
            return StadvStatus::NullArgument;
        }
        let path = match unsafe { cstr(path) } {
            Ok(s) => s,
            Err(code) => return code,
        };
        match stadv_core::checkpoint::load_model(path) {
            Ok((model, normalizer, defense)) => {
                let handle = Box::new(StadvModel {
                    model,
                    normalizer,
                    defense,
                });
                unsafe { *out = Box::into_raw(handle) };
                StadvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `model` must be a pointer returned by a `stadv_model_*` constructor, not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn stadv_model_free(model: *mut StadvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Clean test G-MAE (raw speed units) of a model on a dataset.
#[no_mangle]
pub extern "C" fn stadv_model_clean_gmae(
    model: *const StadvModel,
    dataset: *const StadvDataset,
    max_windows: u32,
    out: *mut c_double,
) -> StadvStatus {
    guard(|| {
        let m = nonnull!(model, "model");
        let ds = nonnull!(dataset, "dataset");
        if out.is_null() {
            set_error("null argument: out");
            return StadvStatus::NullArgument;
        }
        let run = || -> Result<f64, StadvError> {
            let split = ds.split_for(m.model.config().t_in, m.model.config().horizon)?;
            let cap = if max_windows == 0 {
                None
            } else {
                Some(max_windows as usize)
            };
            clean_g_mae(&m.model, &split, cap)
        };
        match run() {
            Ok(v) => {
                unsafe { *out = v };
                StadvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

fn decode_params(p: &StadvAttackParams, n: usize) -> Result<(AttackConfig, Setting), StadvError> {
    let method = match p.method {
        0 => Method::Stpgd,
        1 => Method::Stmim,
        other => {
            return Err(StadvError::invalid(format!(
                "method code {} (expected 0 stpgd or 1 stmim)",
                other
            )))
        }
    };
    let selector = match p.selector {
        0 => Selector::Tdns,
        1 => Selector::Random,
        2 => Selector::Degree,
        3 => Selector::Betweenness,
        4 => Selector::PageRank,
        other => {
            return Err(StadvError::invalid(format!(
                "selector code {} (expected 0..=4)",
                other
            )))
        }
    };
    let setting = match p.setting {
        0 => Setting::Grey,
        1 => Setting::White,
        2 => Setting::Black,
        other => {
            return Err(StadvError::invalid(format!(
                "setting code {} (expected 0 grey, 1 white, 2 black)",
                other
            )))
        }
    };
    let cfg = AttackConfig {
        eps: p.epsilon,
        alpha: p.alpha,
        iters: p.iters as usize,
        eta: p.eta as usize,
        selector,
        method,
        momentum: p.momentum,
        seed: p.seed,
        domain_clip: p.domain_clip != 0,
        accumulate_saliency: false,
    };
    cfg.validate(n)?;
    Ok((cfg, setting))
}

/// Run one attack evaluation against the target (surrogate required for the
/// black-box setting, ignored otherwise) and fill `out` with the metrics.
#[no_mangle]
pub extern "C" fn stadv_attack_evaluate(
    target: *const StadvModel,
    surrogate: *const StadvModel,
    dataset: *const StadvDataset,
    params: *const StadvAttackParams,
    out: *mut StadvMetrics,
) -> StadvStatus {
    guard(|| {
        let target = nonnull!(target, "target");
        let ds = nonnull!(dataset, "dataset");
        let params = nonnull!(params, "params");
        if out.is_null() {
            set_error("null argument: out");
            return StadvStatus::NullArgument;
        }
        let surrogate = unsafe { surrogate.as_ref() };
        let run = || -> Result<StadvMetrics, StadvError> {
            let (cfg, setting) = decode_params(params, ds.graph.node_count())?;
            let split = ds.split_for(target.model.config().t_in, target.model.config().horizon)?;
            let cap = if params.max_windows == 0 {
                None
            } else {
                Some(params.max_windows as usize)
            };
            let batch = if params.batch == 0 {
                64
            } else {
                params.batch as usize
            };
            let eval = evaluate_attack(
                &target.model,
                surrogate.map(|s| &s.model),
                &split,
                &ds.graph,
                setting,
                &cfg,
                batch,
                cap,
            )?;
            Ok(StadvMetrics {
                g_mae: eval.report.g_mae,
                l_mae: eval.report.l_mae,
                g_rmse: eval.report.g_rmse,
                l_rmse: eval.report.l_rmse,
                clean_g_mae: eval.clean_g_mae,
                degradation_pct: eval.report.degradation_pct.unwrap_or(0.0),
            })
        };
        match run() {
            Ok(metrics) => {
                unsafe { *out = metrics };
                StadvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Randomized verification of the worst-case embedding-gap bound
/// (graphs up to 10 nodes, up to 3 layers, ReLU). Returns
/// `STADV_STATUS_BOUND_VIOLATION` if any trial exceeds the bound.
#[no_mangle]
pub extern "C" fn stadv_verify_bound(
    trials: u64,
    seed: u64,
    max_ratio_out: *mut c_double,
) -> StadvStatus {
    guard(|| {
        if max_ratio_out.is_null() {
            set_error("null argument: max_ratio_out");
            return StadvStatus::NullArgument;
        }
        match stadv_core::bound::verify_bound_randomized(
            trials as usize,
            seed,
            10,
            3,
            Activation::Relu,
        ) {
            Ok(report) => {
                unsafe { *max_ratio_out = report.max_ratio };
                StadvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn generate(nodes: u32, steps: u32, seed: u64) -> *mut StadvDataset {
        let mut ds: *mut StadvDataset = ptr::null_mut();
        let status = stadv_dataset_generate(nodes, steps, seed, &mut ds);
        assert_eq!(status, StadvStatus::Ok);
        assert!(!ds.is_null());
        ds
    }

    fn train(ds: *const StadvDataset) -> *mut StadvModel {
        let mut model: *mut StadvModel = ptr::null_mut();
        let status = stadv_model_train(ds, 6, 6, 6, 0.1, 3, 0.02, 3, &mut model);
        assert_eq!(status, StadvStatus::Ok);
        model
    }

    #[test]
    fn round_trip_generate_train_attack() {
        let ds = generate(10, 220, 3);
        assert_eq!(stadv_dataset_nodes(ds), 10);
        assert_eq!(stadv_dataset_steps(ds), 220);
        let model = train(ds);

        let mut clean = 0.0;
        assert_eq!(
            stadv_model_clean_gmae(model, ds, 16, &mut clean),
            StadvStatus::Ok
        );
        assert!(clean > 0.0);

        let params = StadvAttackParams {
            epsilon: 0.5,
            alpha: 0.1,
            iters: 5,
            eta: 1,
            method: 0,
            selector: 0,
            setting: 1,
            momentum: 1.0,
            seed: 3,
            max_windows: 8,
            batch: 8,
            domain_clip: 0,
        };
        let mut metrics = StadvMetrics::default();
        assert_eq!(
            stadv_attack_evaluate(model, ptr::null(), ds, &params, &mut metrics),
            StadvStatus::Ok
        );
        assert!(metrics.g_mae >= metrics.clean_g_mae * 0.5);
        assert!(metrics.l_mae >= 0.0);

        unsafe {
            stadv_model_free(model);
            stadv_dataset_free(ds);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stadv");
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let ds = generate(8, 200, 5);
        let model = train(ds);
        assert_eq!(stadv_model_save(model, cpath.as_ptr()), StadvStatus::Ok);
        let mut loaded: *mut StadvModel = ptr::null_mut();
        assert_eq!(
            stadv_model_load(cpath.as_ptr(), &mut loaded),
            StadvStatus::Ok
        );
        let mut a = 0.0;
        let mut b = 0.0;
        assert_eq!(stadv_model_clean_gmae(model, ds, 8, &mut a), StadvStatus::Ok);
        assert_eq!(stadv_model_clean_gmae(loaded, ds, 8, &mut b), StadvStatus::Ok);
        assert_eq!(a.to_bits(), b.to_bits());
        unsafe {
            stadv_model_free(model);
            stadv_model_free(loaded);
            stadv_dataset_free(ds);
        }
    }

    #[test]
    fn null_arguments_report_status_and_message() {
        let mut ds: *mut StadvDataset = ptr::null_mut();
        assert_eq!(
            stadv_dataset_generate(0, 10, 0, &mut ds),
            StadvStatus::InvalidArgument
        );
        let msg = unsafe { CStr::from_ptr(stadv_last_error()) };
        assert!(msg.to_str().unwrap().contains("n >= 2"));

        assert_eq!(
            stadv_dataset_load(ptr::null(), ptr::null(), &mut ds),
            StadvStatus::NullArgument
        );
        let mut out = 0.0;
        assert_eq!(
            stadv_model_clean_gmae(ptr::null(), ptr::null(), 0, &mut out),
            StadvStatus::NullArgument
        );

        let missing = CString::new("definitely-missing.stadv").unwrap();
        let mut model: *mut StadvModel = ptr::null_mut();
        assert_eq!(
            stadv_model_load(missing.as_ptr(), &mut model),
            StadvStatus::Io
        );
    }

    #[test]
    fn invalid_attack_params_rejected() {
        let ds = generate(8, 200, 4);
        let model = train(ds);
        let mut params = StadvAttackParams {
            epsilon: 0.5,
            alpha: 0.1,
            iters: 5,
            eta: 1,
            method: 9,
            selector: 0,
            setting: 1,
            momentum: 1.0,
            seed: 0,
            max_windows: 4,
            batch: 4,
            domain_clip: 0,
        };
        let mut metrics = StadvMetrics::default();
        assert_eq!(
            stadv_attack_evaluate(model, ptr::null(), ds, &params, &mut metrics),
            StadvStatus::InvalidArgument
        );
        params.method = 0;
        params.setting = 2; // black box needs a surrogate
        assert_eq!(
            stadv_attack_evaluate(model, ptr::null(), ds, &params, &mut metrics),
            StadvStatus::InvalidArgument
        );
        unsafe {
            stadv_model_free(model);
            stadv_dataset_free(ds);
        }
    }

    #[test]
    fn bound_verification_over_ffi() {
        let mut ratio = -1.0;
        assert_eq!(stadv_verify_bound(300, 9, &mut ratio), StadvStatus::Ok);
        assert!((0.0..=1.0).contains(&ratio));
    }

    #[test]
    fn version_and_error_are_readable() {
        let v = unsafe { CStr::from_ptr(stadv_version()) };
        assert_eq!(v.to_str().unwrap(), "0.1.0");
    }

    /// The committed header must declare every exported symbol.
    #[test]
    fn header_covers_exported_surface() {
        let header = include_str!("../include/stadv.h");
        for symbol in [
            "stadv_version",
            "stadv_last_error",
            "stadv_dataset_generate",
            "stadv_dataset_load",
            "stadv_dataset_nodes",
            "stadv_dataset_steps",
            "stadv_dataset_free",
            "stadv_model_train",
            "stadv_model_save",
            "stadv_model_load",
            "stadv_model_free",
            "stadv_model_clean_gmae",
            "stadv_attack_evaluate",
            "stadv_verify_bound",
        ] {
            assert!(header.contains(symbol), "header missing {}", symbol);
        }
        // Struct layouts named in the header.
        for ty in ["StadvAttackParams", "StadvMetrics", "StadvStatus"] {
            assert!(header.contains(ty), "header missing type {}", ty);
        }
    }
}
