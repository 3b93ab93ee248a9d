//! C ABI over the `polyvit` crate.
//!
//! Every function returns a [`PvStatus`]; on failure the message is kept
//! per thread and read with [`pv_last_error`]. Objects are opaque handles
//! created by `*_new`/`*_load`/`*_parse` functions and released by the
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use polyvit::checkpoint::Checkpoint;
use polyvit::config::RunConfig;
use polyvit::metrics;
use polyvit::model::PolyViT;
use polyvit::schedule::{ScheduleKind, SchedulePlan, Step};
use polyvit::tensor::{DType, Element, Tensor};
use polyvit::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Schedule = 6,
    Model = 7,
    Metric = 8,
    Internal = 9,
}

/// Parameter totals of a configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PvParamBreakdown {
    pub shared: u64,
    pub total: u64,
    /// One single-task model per task, summed.
    pub fleet_total: u64,
    pub fleet_ratio: f64,
    pub num_tasks: u64,
}

/// A parsed run configuration.
pub struct PvConfig(RunConfig);

/// A task-sampling plan.
pub struct PvSchedule(SchedulePlan);

enum AnyModel {
    F32(PolyViT<f32>),
    F64(PolyViT<f64>),
}

/// A model loaded from a checkpoint.
pub struct PvModel {
    config: RunConfig,
    model: AnyModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> PvStatus {
    match e {
        Error::Config { .. } => PvStatus::Config,
        Error::Io { .. } => PvStatus::Io,
        Error::Checkpoint(_) => PvStatus::Checkpoint,
        Error::Schedule(_) => PvStatus::Schedule,
        Error::Metric(_) => PvStatus::Metric,
        _ => PvStatus::Model,
    }
}

struct Fail(PvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PvStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PvStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PvStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PvStatus::Internal
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses configuration text.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pv_config_parse(text: *const c_char, out_config: *mut *mut PvConfig) -> PvStatus {
    guard(|| {
        let slot = out(out_config, "out_config")?;
        let c = RunConfig::parse(c_str(text, "text")?)?;
        *slot = Box::into_raw(Box::new(PvConfig(c)));
        Ok(())
    })
}

/// Loads a built-in preset (`base9` or `toy3`).
///
/// # Safety
/// `name` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pv_config_preset(name: *const c_char, out_config: *mut *mut PvConfig) -> PvStatus {
    guard(|| {
        let slot = out(out_config, "out_config")?;
        let c = RunConfig::preset(c_str(name, "name")?)?;
        *slot = Box::into_raw(Box::new(PvConfig(c)));
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pv_config_free(config: *mut PvConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pv_config_params(config: *const PvConfig, out_breakdown: *mut PvParamBreakdown) -> PvStatus {
    guard(|| {
        let c = handle(config, "config")?;
        let slot = out(out_breakdown, "out_breakdown")?;
        let b = c.0.param_breakdown();
        *slot = PvParamBreakdown {
            shared: b.shared as u64,
            total: b.total as u64,
            fleet_total: b.fleet_total as u64,
            fleet_ratio: b.fleet_ratio(),
            num_tasks: b.per_task.len() as u64,
        };
        Ok(())
    })
}

/// The configured schedule (or `kind`, when not null).
///
/// # Safety
/// Pointers must be valid; `kind` may be null.
#[no_mangle]
pub unsafe extern "C" fn pv_config_schedule(
    config: *const PvConfig,
    kind: *const c_char,
    out_schedule: *mut *mut PvSchedule,
) -> PvStatus {
    guard(|| {
        let c = handle(config, "config")?;
        let slot = out(out_schedule, "out_schedule")?;
        let kind = if kind.is_null() {
            None
        } else {
            Some(c_str(kind, "kind")?.parse::<ScheduleKind>()?)
        };
        *slot = Box::into_raw(Box::new(PvSchedule(c.0.plan(kind)?)));
        Ok(())
    })
}

/// Builds a plan from step budgets.
///
/// # Safety
/// `kind` must be NUL-terminated, `budgets` must hold `num_tasks` values and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pv_schedule_build(
    kind: *const c_char,
    budgets: *const u64,
    num_tasks: usize,
    seed: u64,
    out_schedule: *mut *mut PvSchedule,
) -> PvStatus {
    guard(|| {
        let slot = out(out_schedule, "out_schedule")?;
        let kind: ScheduleKind = c_str(kind, "kind")?.parse()?;
        let budgets = slice(budgets, num_tasks, "budgets")?;
        *slot = Box::into_raw(Box::new(PvSchedule(SchedulePlan::build(kind, budgets, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `schedule` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pv_schedule_free(schedule: *mut PvSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pv_schedule_len(schedule: *const PvSchedule, out_len: *mut u64) -> PvStatus {
    guard(|| {
        *out(out_len, "out_len")? = handle(schedule, "schedule")?.0.len() as u64;
        Ok(())
    })
}

/// Task trained at `step`; -1 means every task (accumulated step).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pv_schedule_step(schedule: *const PvSchedule, step: u64, out_task: *mut i64) -> PvStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        let slot = out(out_task, "out_task")?;
        let st = usize::try_from(step)
            .ok()
            .and_then(|i| s.0.steps.get(i))
            .ok_or_else(|| invalid(format!("step {step} is past the end of the plan")))?;
        *slot = match st {
            Step::Task(j) => *j as i64,
            Step::AllTasks => -1,
        };
        Ok(())
    })
}

/// Steps that train `task` (accumulated steps count for every task).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pv_schedule_count(schedule: *const PvSchedule, task: u64, out_count: *mut u64) -> PvStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        let slot = out(out_count, "out_count")?;
        let counts = s.0.stats().counts;
        *slot = *usize::try_from(task)
            .ok()
            .and_then(|j| counts.get(j))
            .ok_or_else(|| invalid(format!("no task {task}")))?;
        Ok(())
    })
}

/// Loads a checkpoint written by `polyvit train`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pv_model_load(path: *const c_char, out_model: *mut *mut PvModel) -> PvStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let ck = Checkpoint::load(Path::new(c_str(path, "path")?))?;
        let m = match ck.config()?.precision {
            DType::F32 => {
                let (config, model, _) = ck.to_model::<f32>()?;
                PvModel {
                    config,
                    model: AnyModel::F32(model),
                }
            }
            DType::F64 => {
                let (config, model, _) = ck.to_model::<f64>()?;
                PvModel {
                    config,
                    model: AnyModel::F64(model),
                }
            }
        };
        *slot = Box::into_raw(Box::new(m));
        Ok(())
    })
}

/// Writes the model parameters (without optimizer state).
///
/// # Safety
/// Pointers must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pv_model_save(model: *const PvModel, path: *const c_char) -> PvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = Path::new(c_str(path, "path")?);
        let ck = match &m.model {
            AnyModel::F32(p) => Checkpoint::from_model(&m.config, p, None)?,
            AnyModel::F64(p) => Checkpoint::from_model(&m.config, p, None)?,
        };
        ck.save(path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pv_model_free(model: *mut PvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pv_model_num_tasks(model: *const PvModel, out_tasks: *mut u64) -> PvStatus {
    guard(|| {
        *out(out_tasks, "out_tasks")? = handle(model, "model")?.config.tasks.len() as u64;
        Ok(())
    })
}

/// Class count of `task` and the number of input values per example.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pv_model_task_shape(
    model: *const PvModel,
    task: u64,
    out_classes: *mut u64,
    out_input_len: *mut u64,
) -> PvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let classes = out(out_classes, "out_classes")?;
        let input_len = out(out_input_len, "out_input_len")?;
        let j = task_index(m, task)?;
        let spec = &m.config.tasks[j].spec;
        let g = m.config.synthetic(j).geometry;
        *classes = spec.classes as u64;
        *input_len = g.input.iter().product::<usize>() as u64;
        Ok(())
    })
}

/// Total number of parameters of the loaded model.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pv_model_param_count(model: *const PvModel, out_count: *mut u64) -> PvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out(out_count, "out_count")? = match &m.model {
            AnyModel::F32(p) => p.param_count().total as u64,
            AnyModel::F64(p) => p.param_count().total as u64,
        };
        Ok(())
    })
}

fn task_index(m: &PvModel, task: u64) -> Result<usize, Fail> {
    usize::try_from(task)
        .ok()
        .filter(|&j| j < m.config.tasks.len())
        .ok_or_else(|| invalid(format!("no task {task}")))
}

fn logits_with<T: Element>(
    model: &PolyViT<T>,
    task: usize,
    inputs: &[f64],
    batch: usize,
    out_logits: &mut [f64],
) -> Result<(), Fail> {
    let g = model
        .tokenizer(model.tasks[task].modality)
        .map_err(Fail::from)?
        .geometry
        .clone();
    let per = g.input.iter().product::<usize>();
    let classes = model.tasks[task].classes;
    if inputs.len() != batch * per {
        return Err(invalid(format!("expected {} input values, got {}", batch * per, inputs.len())));
    }
    if out_logits.len() != batch * classes {
        return Err(invalid(format!("expected room for {} logits, got {}", batch * classes, out_logits.len())));
    }
    let xs = inputs
        .chunks(per)
        .map(|c| Tensor::<T>::from_f64(g.input.clone(), c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Fail::from(Error::from(e)))?;
    let y = model.logits(task, &xs)?;
    for (o, v) in out_logits.iter_mut().zip(y.data()) {
        *o = v.to_f64_lossy();
    }
    Ok(())
}

/// Eval-mode logits of `batch` examples for `task`. `inputs` holds
/// `batch * input_len` values laid out row-major per example; `out_logits`
/// receives `batch * classes` values.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn pv_model_logits(
    model: *const PvModel,
    task: u64,
    inputs: *const f64,
    inputs_len: usize,
    batch: usize,
    out_logits: *mut f64,
    out_len: usize,
) -> PvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let j = task_index(m, task)?;
        if batch == 0 {
            return Err(invalid("batch must be positive"));
        }
        let inputs = slice(inputs, inputs_len, "inputs")?;
        if out_logits.is_null() {
            return Err(null("out_logits"));
        }
        let out_logits = std::slice::from_raw_parts_mut(out_logits, out_len);
        match &m.model {
            AnyModel::F32(p) => logits_with(p, j, inputs, batch, out_logits),
            AnyModel::F64(p) => logits_with(p, j, inputs, batch, out_logits),
        }
    })
}

/// Top-1 accuracy of `rows x classes` scores against one label per row.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn pv_accuracy(
    scores: *const f64,
    rows: usize,
    classes: usize,
    labels: *const u32,
    out_accuracy: *mut f64,
) -> PvStatus {
    guard(|| {
        let slot = out(out_accuracy, "out_accuracy")?;
        let s = slice(scores, rows * classes, "scores")?;
        let l = slice(labels, rows, "labels")?;
        let t = Tensor::new(vec![rows, classes], s.to_vec()).map_err(|e| Fail::from(Error::from(e)))?;
        let labels: Vec<Vec<u32>> = l.iter().map(|&k| vec![k]).collect();
        *slot = metrics::accuracy(&t, &labels)?;
        Ok(())
    })
}

/// Average precision of one class; `positive[i]` is nonzero for positives.
///
/// # Safety
/// Pointers must be valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn pv_average_precision(
    scores: *const f64,
    positive: *const u8,
    len: usize,
    out_ap: *mut f64,
) -> PvStatus {
    guard(|| {
        let slot = out(out_ap, "out_ap")?;
        let s = slice(scores, len, "scores")?;
        let p: Vec<bool> = slice(positive, len, "positive")?.iter().map(|&b| b != 0).collect();
        *slot = metrics::average_precision(s, &p).ok_or_else(|| Fail(PvStatus::Metric, "no positives".into()))?;
        Ok(())
    })
}

/// Mean average precision of `rows x classes` scores against a multi-hot
/// `rows x classes` label matrix (nonzero = positive).
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn pv_mean_average_precision(
    scores: *const f64,
    labels: *const u8,
    rows: usize,
    classes: usize,
    out_map: *mut f64,
) -> PvStatus {
    guard(|| {
        let slot = out(out_map, "out_map")?;
        let s = slice(scores, rows * classes, "scores")?;
        let l = slice(labels, rows * classes, "labels")?;
        let t = Tensor::new(vec![rows, classes], s.to_vec()).map_err(|e| Fail::from(Error::from(e)))?;
        let labels: Vec<Vec<u32>> = l
            .chunks(classes.max(1))
            .map(|r| (0..r.len() as u32).filter(|&k| r[k as usize] != 0).collect())
            .collect();
        *slot = metrics::mean_average_precision(&t, &labels)?;
        Ok(())
    })
}
