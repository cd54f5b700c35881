use std::ffi::CString;
use std::path::Path;
use std::process::Command;
use std::ptr;

use ccac::baselines::{Shield, ShieldConfig};
use ccac::env::{CarFollowing, State};
use ccac::harness::config::ExperimentConfig;
use ccac::harness::run::{cmd_train, RunDir};
use ccac::rollout::Policy;
use ccac_ffi::*;

fn last_error() -> String {
    let n = unsafe { ccac_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0 as std::ffi::c_char; n + 1];
    unsafe { ccac_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn env() -> *mut CcacEnv {
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { ccac_env_new_default(&mut e) }, CcacStatus::Ok);
    assert!(!e.is_null());
    e
}

fn train(method: &str, dir: &Path) {
    let text = format!(
        r#"
method = "{method}"
threshold = 0.9
seeds = [5]
output_dir = "{}"
[trainer]
trajectories = 8
horizon = 8
hidden = [4, 4]
max_iters = 2
"#,
        dir.display()
    );
    cmd_train(&ExperimentConfig::from_toml_str(&text).unwrap(), None).unwrap();
}

#[test]
fn step_matches_the_rust_model() {
    let e = env();
    let s = CcacState {
        v_e: 5.0,
        v_f: 6.0,
        eps: 4.0,
    };
    let mut next = CcacState {
        v_e: 0.0,
        v_f: 0.0,
        eps: 0.0,
    };
    assert_eq!(unsafe { ccac_env_step(e, s, 1.0, 0.5, &mut next) }, CcacStatus::Ok);
    let want = CarFollowing::default()
        .step(&State::new(5.0, 6.0, 4.0), ccac::env::Action(1.0), 0.5)
        .unwrap();
    assert_eq!(State::from(next), want);

    let mut r = 0.0;
    assert_eq!(unsafe { ccac_env_reward(e, s, &mut r) }, CcacStatus::Ok);
    assert!((r - (0.2 * 5.0 - 0.05 * 4.0)).abs() < 1e-12);

    let mut safe = false;
    assert_eq!(unsafe { ccac_env_is_safe(e, s, &mut safe) }, CcacStatus::Ok);
    assert!(safe);
    let at_min = CcacState { eps: 2.0, ..s };
    assert_eq!(unsafe { ccac_env_is_safe(e, at_min, &mut safe) }, CcacStatus::Ok);
    assert!(!safe);

    let (mut x1, mut x2) = (0.0, 0.0);
    unsafe {
        ccac_env_sample_disturbance(e, 9, &mut x1);
        ccac_env_sample_disturbance(e, 9, &mut x2);
    }
    assert_eq!(x1, x2);
    assert!(x1.abs() < 5.0);
    unsafe { ccac_env_free(e) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let e = env();
    let s = CcacState {
        v_e: 5.0,
        v_f: 6.0,
        eps: 4.0,
    };
    let mut next = s;
    assert_eq!(unsafe { ccac_env_step(e, s, 3.5, 0.0, &mut next) }, CcacStatus::OutOfBounds);
    assert!(last_error().contains("3.5"), "{}", last_error());
    assert_eq!(unsafe { ccac_env_step(e, s, 0.0, -6.0, &mut next) }, CcacStatus::OutOfBounds);
    assert_eq!(unsafe { ccac_env_step(e, s, 0.0, 0.0, ptr::null_mut()) }, CcacStatus::NullPointer);
    assert!(last_error().contains("next"));
    assert_eq!(unsafe { ccac_env_step(ptr::null(), s, 0.0, 0.0, &mut next) }, CcacStatus::NullPointer);

    assert_eq!(unsafe { ccac_env_step(e, s, 0.0, 0.0, &mut next) }, CcacStatus::Ok);
    assert_eq!(last_error(), "");

    let mut sh = ptr::null_mut();
    assert_eq!(unsafe { ccac_shield_new(e, 1.5, 80, &mut sh) }, CcacStatus::InvalidArgument);
    assert!(sh.is_null());

    let missing = c_path(Path::new("/nonexistent/actor.params"));
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { ccac_policy_load_params(missing.as_ptr(), &mut p) }, CcacStatus::Io);
    let mut small = [0 as std::ffi::c_char; 4];
    let full = unsafe { ccac_last_error_message(small.as_mut_ptr(), small.len()) };
    assert!(full > 3);
    assert_eq!(small[3], 0);
    unsafe { ccac_env_free(e) };
}

#[test]
fn shield_matches_the_rust_projection() {
    let e = env();
    let mut sh = ptr::null_mut();
    assert_eq!(unsafe { ccac_shield_new(e, 0.1, 80, &mut sh) }, CcacStatus::Ok);
    let rust = Shield::new(&CarFollowing::default(), ShieldConfig::default()).unwrap();
    for (s, a) in [((5.0, 5.0, 2.6), 3.0), ((7.0, 5.0, 2.5), 0.0), ((5.0, 6.0, 40.0), 2.0), ((15.0, 5.0, 2.05), 1.0)] {
        let cs = CcacState {
            v_e: s.0,
            v_f: s.1,
            eps: s.2,
        };
        let (mut got, mut thr) = (f64::NAN, f64::NAN);
        assert_eq!(unsafe { ccac_shield_project(sh, cs, a, &mut got) }, CcacStatus::Ok);
        assert_eq!(unsafe { ccac_shield_threshold(sh, cs, &mut thr) }, CcacStatus::Ok);
        let st = State::new(s.0, s.1, s.2);
        assert_eq!(got, rust.project(&st, a));
        assert_eq!(thr, rust.threshold(&st));
    }
    let mut out = 0.0;
    let cs = CcacState {
        v_e: 5.0,
        v_f: 5.0,
        eps: 5.0,
    };
    assert_eq!(unsafe { ccac_shield_project(sh, cs, f64::NAN, &mut out) }, CcacStatus::InvalidArgument);
    unsafe {
        ccac_shield_free(sh);
        ccac_env_free(e);
    }
}

#[test]
fn trained_policies_load_and_act_like_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    for method in ["ccac", "shielding"] {
        let dir = tmp.path().join(method);
        train(method, &dir);
        let run = RunDir::open(&dir).unwrap();
        let rust = run.policy(5).unwrap();

        let cdir = c_path(&dir);
        let mut p = ptr::null_mut();
        assert_eq!(unsafe { ccac_policy_load_run(cdir.as_ptr(), 5, &mut p) }, CcacStatus::Ok, "{}", last_error());
        let mut shielded = false;
        unsafe { ccac_policy_is_shielded(p, &mut shielded) };
        assert_eq!(shielded, method == "shielding");

        let mut scratch = rust.scratch();
        for s in [State::new(5.0, 6.0, 6.0), State::new(7.0, 3.0, 2.4), State::new(3.0, 7.0, 9.0)] {
            let mut want = [0.0];
            rust.act_batch(&[s], &mut scratch, &mut [], &mut want);
            let mut got = f64::NAN;
            assert_eq!(unsafe { ccac_policy_act(p, s.into(), &mut got) }, CcacStatus::Ok);
            assert_eq!(got, want[0]);
            assert!((-4.0..=3.0).contains(&got));
        }
        unsafe { ccac_policy_free(p) };

        let params = c_path(&dir.join("seed-5/actor.params"));
        let mut bare = ptr::null_mut();
        assert_eq!(unsafe { ccac_policy_load_params(params.as_ptr(), &mut bare) }, CcacStatus::Ok);
        let mut a = f64::NAN;
        let s = State::new(5.0, 6.0, 6.0);
        unsafe { ccac_policy_act(bare, s.into(), &mut a) };
        assert_eq!(a, rust.actor.forward(&rust.params, &s.to_array()).unwrap()[0]);
        unsafe { ccac_policy_free(bare) };
    }
    let mut p = ptr::null_mut();
    let cdir = c_path(&tmp.path().join("ccac"));
    assert_eq!(unsafe { ccac_policy_load_run(cdir.as_ptr(), 99, &mut p) }, CcacStatus::Io);
}

#[test]
fn free_accepts_null() {
    unsafe {
        ccac_env_free(ptr::null_mut());
        ccac_policy_free(ptr::null_mut());
        ccac_shield_free(ptr::null_mut());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { std::ffi::CStr::from_ptr(ccac_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ccac.h");
    assert!(header.exists());
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["ccac_policy_act", "ccac_shield_project", "ccac_env_step", "CCAC_STATUS_NULL_POINTER"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ccac.h\"\n\
         int main(void) {\n\
           CcacEnv *e = 0;\n\
           CcacState s = {5, 6, 6};\n\
           double a;\n\
           if (ccac_env_new_default(&e) != CCAC_STATUS_OK)\n\
             return 1;\n\
           ccac_env_reward(e, s, &a);\n\
           ccac_env_free(e);\n\
           return 0;\n\
         }\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(header.parent().unwrap())
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(e) => eprintln!("skipping {compiler}: {e}"),
        }
    }
}
