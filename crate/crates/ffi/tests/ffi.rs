use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lastrank::checkpoint::{save_checkpoint, Checkpoint};
use lastrank::evaluator::gather_rows;
use lastrank::last::{serve, LastConfig, Policy};
use lastrank::{ActorModel, EvaluatorModel, ModelDims, Request};
use lastrank_ffi::*;

const DIMS: ModelDims = ModelDims {
    user_dim: 3,
    item_dim: 2,
    hidden: 6,
};

struct Models {
    dir: tempfile::TempDir,
    actor: ActorModel,
    evaluator: EvaluatorModel,
}

impl Models {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let actor = ActorModel::init(DIMS, 21);
        let evaluator = EvaluatorModel::init(DIMS, 3, 22);
        save_checkpoint(dir.path().join("actor.json"), &Checkpoint::from_actor(&actor, 3)).unwrap();
        save_checkpoint(dir.path().join("eval.json"), &Checkpoint::from_evaluator(&evaluator)).unwrap();
        Self { dir, actor, evaluator }
    }

    fn path(&self, name: &str) -> CString {
        CString::new(self.dir.path().join(name).to_str().unwrap()).unwrap()
    }

    fn load(&self) -> *mut LrEngine {
        let mut engine = ptr::null_mut();
        let st = unsafe { lr_engine_load(self.path("actor.json").as_ptr(), self.path("eval.json").as_ptr(), &mut engine) };
        assert_eq!(st, LrStatus::Ok);
        assert!(!engine.is_null());
        engine
    }
}

fn last_error() -> String {
    let p = lr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn request(i: usize) -> (Vec<f64>, Vec<f64>) {
    let user: Vec<f64> = (0..3).map(|k| ((i * 7 + k) as f64 * 0.37).sin()).collect();
    let cands: Vec<f64> = (0..12).map(|k| ((i * 13 + k) as f64 * 0.61).cos()).collect();
    (user, cands)
}

fn serve_ffi(engine: *const LrEngine, policy: LrPolicy, user: &[f64], cands: &[f64], n: usize) -> (Vec<usize>, f64, f64) {
    let mut order = vec![usize::MAX; n];
    let (mut eta, mut score) = (f64::NAN, f64::NAN);
    let st = unsafe {
        lr_engine_serve(
            engine,
            policy as i32,
            user.as_ptr(),
            user.len(),
            cands.as_ptr(),
            cands.len() / 2,
            2,
            n,
            order.as_mut_ptr(),
            order.len(),
            &mut eta,
            &mut score,
        )
    };
    assert_eq!(st, LrStatus::Ok, "{}", last_error());
    (order, eta, score)
}

#[test]
fn serving_matches_the_library_and_leaves_parameters_alone() {
    let m = Models::new();
    let engine = m.load();
    let mut before = 0u64;
    assert_eq!(unsafe { lr_engine_fingerprint(engine, &mut before) }, LrStatus::Ok);

    let (mut ud, mut id) = (0, 0);
    assert_eq!(unsafe { lr_engine_dims(engine, &mut ud, &mut id) }, LrStatus::Ok);
    assert_eq!((ud, id), (3, 2));

    let config = LastConfig::for_actor(&m.actor);
    let pairs = [
        (LrPolicy::Greedy, Policy::Greedy),
        (LrPolicy::Sampling, Policy::Sampling),
        (LrPolicy::Last, Policy::Last),
        (LrPolicy::Cascade, Policy::Cascade),
    ];
    for i in 0..10 {
        let (user, cands) = request(i);
        let rows: Vec<&[f64]> = cands.chunks(2).collect();
        let req = Request::new(user.clone(), &rows, 3).unwrap();
        for (c_policy, policy) in pairs {
            let expected = serve(
                policy,
                &m.actor,
                &req,
                |o| {
                    let items = gather_rows(req.candidates(), o)?;
                    m.evaluator.evaluator_at_n(req.user(), &items, o.len())
                },
                &config,
            )
            .unwrap();
            let (order, eta, score) = serve_ffi(engine, c_policy, &user, &cands, 3);
            assert_eq!(order, expected.list.order);
            assert_eq!(eta.to_bits(), expected.eta_star.to_bits());
            assert_eq!(score.to_bits(), expected.score.to_bits());
        }
    }

    let mut after = 0u64;
    assert_eq!(unsafe { lr_engine_fingerprint(engine, &mut after) }, LrStatus::Ok);
    assert_eq!(before, after);
    unsafe { lr_engine_free(engine) };
}

#[test]
fn configuration_calls_validate() {
    let m = Models::new();
    let engine = m.load();
    unsafe {
        assert_eq!(lr_engine_set_alpha(engine, 0.05), LrStatus::Ok);
        assert_eq!(lr_engine_set_alpha(engine, -1.0), LrStatus::InvalidArgument);
        let steps = [0.0, 1.0, -1.0];
        assert_eq!(lr_engine_set_step_sizes(engine, steps.as_ptr(), 3), LrStatus::Ok);
        let no_zero = [1.0, -1.0];
        assert_eq!(lr_engine_set_step_sizes(engine, no_zero.as_ptr(), 2), LrStatus::InvalidArgument);
        assert!(last_error().contains("0"));
        assert_eq!(lr_engine_set_seed(engine, 9), LrStatus::Ok);
        assert_eq!(lr_engine_set_seed(ptr::null_mut(), 9), LrStatus::NullPointer);
        lr_engine_free(engine);
        lr_engine_free(ptr::null_mut());
    }
}

#[test]
fn error_codes() {
    let m = Models::new();
    let mut engine = ptr::null_mut();
    let missing = CString::new("/nonexistent/actor.json").unwrap();
    let st = unsafe { lr_engine_load(missing.as_ptr(), m.path("eval.json").as_ptr(), &mut engine) };
    assert_eq!(st, LrStatus::Io);
    assert!(engine.is_null());
    assert!(last_error().contains("nonexistent"));

    // swapped checkpoints
    let st = unsafe { lr_engine_load(m.path("eval.json").as_ptr(), m.path("actor.json").as_ptr(), &mut engine) };
    assert_eq!(st, LrStatus::InvalidArgument);

    let bumped = m.dir.path().join("v2.json");
    let text = std::fs::read_to_string(m.dir.path().join("actor.json")).unwrap();
    std::fs::write(&bumped, text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1)).unwrap();
    let st = unsafe { lr_engine_load(m.path("v2.json").as_ptr(), m.path("eval.json").as_ptr(), &mut engine) };
    assert_eq!(st, LrStatus::SchemaVersion);

    std::fs::write(&bumped, "{").unwrap();
    let st = unsafe { lr_engine_load(m.path("v2.json").as_ptr(), m.path("eval.json").as_ptr(), &mut engine) };
    assert_eq!(st, LrStatus::Parse);

    let st = unsafe { lr_engine_load(ptr::null(), m.path("eval.json").as_ptr(), &mut engine) };
    assert_eq!(st, LrStatus::NullPointer);

    let engine = m.load();
    let (user, cands) = request(0);
    let mut order = [0usize; 2];
    let (mut eta, mut score) = (0.0, 0.0);
    let mut call = |policy: i32, user_len: usize, n: usize, order: &mut [usize]| unsafe {
        lr_engine_serve(
            engine,
            policy,
            user.as_ptr(),
            user_len,
            cands.as_ptr(),
            6,
            2,
            n,
            order.as_mut_ptr(),
            order.len(),
            &mut eta,
            &mut score,
        )
    };
    assert_eq!(call(LrPolicy::Greedy as i32, 3, 3, &mut order), LrStatus::BufferTooSmall);
    assert_eq!(call(7, 3, 2, &mut order), LrStatus::InvalidArgument);
    assert_eq!(call(LrPolicy::Greedy as i32, 4, 2, &mut order), LrStatus::InvalidArgument);
    assert_eq!(call(LrPolicy::Greedy as i32, 3, 0, &mut order), LrStatus::InvalidArgument);
    assert_eq!(call(LrPolicy::Greedy as i32, 3, 2, &mut order), LrStatus::Ok);
    assert!(lr_last_error_message().is_null());
    unsafe { lr_engine_free(engine) };
}

fn static_lib() -> Option<PathBuf> {
    let deps = std::env::current_exe().ok()?.parent()?.to_path_buf();
    let lib = deps.join("liblastrank_ffi.a");
    lib.exists().then_some(lib)
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "lastrank.h"

int main(int argc, char **argv) {
    LrEngine *engine = NULL;
    if (lr_engine_load(argv[1], argv[2], &engine) != LR_STATUS_OK) {
        fprintf(stderr, "load: %s\n", lr_last_error_message());
        return 1;
    }
    double user[3] = {0.1, -0.4, 0.7};
    double cands[8] = {0.5, 0.1, -0.3, 0.9, 0.2, -0.8, 0.0, 0.4};
    size_t order[3];
    double eta, score;
    LrStatus st = lr_engine_serve(engine, LR_POLICY_LAST, user, 3, cands, 4, 2, 3, order, 3, &eta, &score);
    if (st != LR_STATUS_OK) {
        fprintf(stderr, "serve: %s\n", lr_last_error_message());
        return 1;
    }
    printf("%zu %zu %zu %.17g %.17g\n", order[0], order[1], order[2], eta, score);
    st = lr_engine_serve(engine, LR_POLICY_LAST, user, 3, cands, 4, 2, 3, order, 2, &eta, &score);
    printf("%d %s\n", (int)st, lr_last_error_message());
    lr_engine_free(engine);
    printf("%s\n", lr_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("lastrank.h").exists());
    let Some(lib) = static_lib() else {
        eprintln!("static library not found next to the test binary; skipping C link check");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler on PATH; skipping C link check");
        return;
    }
    let m = Models::new();
    let src = m.dir.path().join("main.c");
    let exe = m.dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe)
        .arg(m.dir.path().join("actor.json"))
        .arg(m.dir.path().join("eval.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    let user = vec![0.1, -0.4, 0.7];
    let rows = [[0.5, 0.1], [-0.3, 0.9], [0.2, -0.8], [0.0, 0.4]];
    let req = Request::new(user, &rows, 3).unwrap();
    let r = serve(
        Policy::Last,
        &m.actor,
        &req,
        |o| {
            let items = gather_rows(req.candidates(), o)?;
            m.evaluator.evaluator_at_n(req.user(), &items, o.len())
        },
        &LastConfig::for_actor(&m.actor),
    )
    .unwrap();
    let fields: Vec<&str> = lines[0].split(' ').collect();
    let order: Vec<usize> = fields[..3].iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(order, r.list.order);
    assert_eq!(fields[3].parse::<f64>().unwrap(), r.eta_star);
    assert_eq!(fields[4].parse::<f64>().unwrap(), r.score);
    assert!(lines[1].starts_with(&format!("{} ", LrStatus::BufferTooSmall as i32)));
    assert_eq!(lines[2], env!("CARGO_PKG_VERSION"));
}
