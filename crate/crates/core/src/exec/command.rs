use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    excerpt, lcov, CandidateSpec, ExecBackend, ExecError, ExecOutcome, ExecStatus, Scratch,
};
use crate::coverage::CoverageMap;

const SKIP_DIRS: &[&str] = &[".git", "target", "node_modules"];

/// Runs shell commands in a per-candidate copy of the project root.
///
/// Commands are templates; `{test_name}`, `{test_class}` (root-relative),
/// `{workdir}` and `{coverage_artifact}` are substituted. The instrumented
/// run reuses the test command with `TESTGEN_COVERAGE=1` and
/// `TESTGEN_COVERAGE_FILE` pointing at the expected artifact.
#[derive(Debug)]
pub struct CommandBackend {
    root: PathBuf,
    scratch_base: tempfile::TempDir,
    timeout: Duration,
}

impl CommandBackend {
    pub fn new(root: &Path, workdir: Option<&Path>, timeout: Duration) -> Result<Self, ExecError> {
        let builder = {
            let mut b = tempfile::Builder::new();
            b.prefix("testgen-scratch-");
            b
        };
        let scratch_base = match workdir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| ExecError::Scratch(e.to_string()))?;
                builder.tempdir_in(dir)
            }
            None => builder.tempdir(),
        }
        .map_err(|e| ExecError::Scratch(e.to_string()))?;
        Ok(Self {
            root: root.to_path_buf(),
            scratch_base,
            timeout,
        })
    }

    fn scratch_dir<'a>(&self, scratch: &'a Scratch) -> Result<&'a Path, ExecError> {
        scratch
            .dir()
            .ok_or_else(|| ExecError::Scratch("workspace was not staged by this backend".into()))
    }

    fn expand(&self, template: &str, scratch: &Scratch, dir: &Path, test_name: &str) -> String {
        template
            .replace("{test_name}", test_name)
            .replace("{test_class}", &scratch.test_class)
            .replace("{workdir}", &dir.display().to_string())
            .replace(
                "{coverage_artifact}",
                &scratch.coverage_artifact.replace("{test_name}", test_name),
            )
    }

    fn run_shell(
        &self,
        command: &str,
        dir: &Path,
        env: &[(&str, String)],
    ) -> Result<(Option<i32>, Vec<u8>, Vec<u8>), ExecError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .current_dir(dir)
            .envs(env.iter().map(|(k, v)| (*k, v.as_str())))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()
            .map_err(|e| ExecError::Launch {
                command: command.to_string(),
                message: e.to_string(),
            })?;

        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let err_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if Instant::now() >= deadline => {
                    // Kill the whole process group so grandchildren release
                    // the pipes.
                    // SAFETY: the child leads its own process group.
                    unsafe {
                        libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
                    }
                    let _ = child.kill();
                    let _ = child.wait();
                    break None;
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(e) => {
                    return Err(ExecError::Launch {
                        command: command.to_string(),
                        message: e.to_string(),
                    })
                }
            }
        };
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        match status {
            Some(status) => Ok((Some(status.code().unwrap_or(-1)), out, err)),
            None => Ok((None, out, err)),
        }
    }

    fn execute(
        &self,
        command: &str,
        dir: &Path,
        env: &[(&str, String)],
        failure: ExecStatus,
    ) -> Result<ExecOutcome, ExecError> {
        let (code, out, err) = self.run_shell(command, dir, env)?;
        let status = match code {
            None => ExecStatus::Timeout,
            Some(0) => ExecStatus::Ok,
            Some(_) => failure,
        };
        Ok(ExecOutcome {
            status,
            stdout_excerpt: excerpt(&out),
            stderr_excerpt: excerpt(&err),
            coverage: None,
        })
    }

    fn base_env(scratch: &Scratch, dir: &Path, test_name: &str) -> Vec<(&'static str, String)> {
        vec![
            ("TESTGEN_WORKDIR", dir.display().to_string()),
            ("TESTGEN_TEST_CLASS", scratch.test_class.clone()),
            ("TESTGEN_TEST_NAME", test_name.to_string()),
            ("TESTGEN_COVERAGE", "0".to_string()),
        ]
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .take(60)
        .collect()
}

fn copy_tree(from: &Path, to: &Path, skip: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let path = entry.path();
        if path == skip {
            continue;
        }
        let name = entry.file_name();
        let file_type = entry.file_type()?;
        if file_type.is_dir() {
            if SKIP_DIRS.iter().any(|s| name == *s) {
                continue;
            }
            copy_tree(&path, &to.join(&name), skip)?;
        } else if file_type.is_file() {
            std::fs::copy(&path, to.join(&name))?;
        } else if file_type.is_symlink() {
            let target = std::fs::read_link(&path)?;
            std::os::unix::fs::symlink(target, to.join(&name))?;
        }
    }
    Ok(())
}

/// Maps an `SF:` path to a project-relative key.
fn relative_key(path: &str, dir: &Path) -> String {
    let p = Path::new(path);
    let rel = if p.is_absolute() {
        let canonical = dir.canonicalize().ok();
        p.strip_prefix(dir)
            .ok()
            .or_else(|| canonical.as_deref().and_then(|c| p.strip_prefix(c).ok()))
            .unwrap_or(p)
    } else {
        p
    };
    let text = rel.to_string_lossy().replace('\\', "/");
    text.trim_start_matches("./").to_string()
}

impl ExecBackend for CommandBackend {
    fn parallel_safe(&self) -> bool {
        true
    }

    fn prepare(&self, spec: &CandidateSpec) -> Result<Scratch, ExecError> {
        let dir = tempfile::Builder::new()
            .prefix(&format!("{}-", sanitize(spec.candidate_id)))
            .tempdir_in(self.scratch_base.path())
            .map_err(|e| ExecError::Scratch(e.to_string()))?;
        copy_tree(&self.root, dir.path(), self.scratch_base.path())
            .map_err(|e| ExecError::Scratch(format!("copying {}: {e}", self.root.display())))?;
        let class_path = dir.path().join(spec.test_class);
        if let Some(parent) = class_path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ExecError::Scratch(e.to_string()))?;
        }
        std::fs::write(&class_path, spec.class_text)
            .map_err(|e| ExecError::Scratch(format!("{}: {e}", class_path.display())))?;
        Ok(Scratch::from_spec(spec, Some(dir)))
    }

    fn build(&self, scratch: &Scratch) -> Result<ExecOutcome, ExecError> {
        let dir = self.scratch_dir(scratch)?;
        let test = scratch.new_test.as_deref().unwrap_or("");
        let command = self.expand(&scratch.build_command, scratch, dir, test);
        self.execute(
            &command,
            dir,
            &Self::base_env(scratch, dir, test),
            ExecStatus::BuildFailed,
        )
    }

    fn run_test(&self, scratch: &Scratch, test_name: &str) -> Result<ExecOutcome, ExecError> {
        let dir = self.scratch_dir(scratch)?;
        scratch.next_run();
        let command = self.expand(&scratch.test_command, scratch, dir, test_name);
        self.execute(
            &command,
            dir,
            &Self::base_env(scratch, dir, test_name),
            ExecStatus::TestFailed,
        )
    }

    fn measure_coverage(
        &self,
        scratch: &Scratch,
        test_name: &str,
    ) -> Result<CoverageMap, ExecError> {
        let dir = self.scratch_dir(scratch)?;
        let artifact = dir.join(scratch.coverage_artifact.replace("{test_name}", test_name));
        let _ = std::fs::remove_file(&artifact);

        let command = self.expand(&scratch.test_command, scratch, dir, test_name);
        let mut env = Self::base_env(scratch, dir, test_name);
        env.retain(|(k, _)| *k != "TESTGEN_COVERAGE");
        env.push(("TESTGEN_COVERAGE", "1".to_string()));
        env.push(("TESTGEN_COVERAGE_FILE", artifact.display().to_string()));
        let outcome = self.execute(&command, dir, &env, ExecStatus::TestFailed)?;
        if !outcome.is_ok() {
            return Err(ExecError::CoverageRunFailed {
                test: test_name.to_string(),
                status: outcome.status,
            });
        }

        let text = std::fs::read_to_string(&artifact)
            .map_err(|_| ExecError::ArtifactMissing(artifact.clone()))?;
        let parsed = lcov::parse_with(&text, |p| relative_key(p, dir));
        let _ = std::fs::remove_file(&artifact);
        parsed.map_err(|e| ExecError::ArtifactMalformed {
            path: artifact,
            line: e.line,
            message: e.message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn project() -> tempfile::TempDir {
        let root = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(root.path().join("tests")).unwrap();
        std::fs::write(root.path().join("tests/A.kt"), "original").unwrap();
        std::fs::create_dir_all(root.path().join(".git")).unwrap();
        std::fs::write(root.path().join(".git/HEAD"), "ref").unwrap();
        root
    }

    fn spec<'a>(build: &'a str, test: &'a str, artifact: &'a str) -> CandidateSpec<'a> {
        CandidateSpec {
            candidate_id: "cand/1",
            target_id: "t",
            test_class: "tests/A.kt",
            class_text: "candidate",
            new_test: Some("newTest"),
            build_command: build,
            test_command: test,
            coverage_artifact: artifact,
        }
    }

    #[test]
    fn build_runs_in_scratch_copy_and_leaves_root_untouched() {
        let root = project();
        let backend = CommandBackend::new(root.path(), None, Duration::from_secs(10)).unwrap();
        let scratch = backend
            .prepare(&spec(
                "grep -q candidate {test_class} && test ! -d .git",
                "true",
                "cov.info",
            ))
            .unwrap();
        let dir = scratch.dir().unwrap().to_path_buf();
        assert!(backend.build(&scratch).unwrap().is_ok());
        assert_eq!(
            std::fs::read_to_string(root.path().join("tests/A.kt")).unwrap(),
            "original"
        );
        drop(scratch);
        assert!(!dir.exists());
    }

    #[test]
    fn failing_build_reports_stderr() {
        let root = project();
        let backend = CommandBackend::new(root.path(), None, Duration::from_secs(10)).unwrap();
        let scratch = backend.prepare(&spec("false", "true", "x")).unwrap();
        assert_eq!(
            backend.build(&scratch).unwrap().status,
            ExecStatus::BuildFailed
        );
        let scratch = backend
            .prepare(&spec(
                "echo 'error: unresolved reference: frobnicate' >&2; exit 3",
                "true",
                "x",
            ))
            .unwrap();
        let outcome = backend.build(&scratch).unwrap();
        assert_eq!(outcome.status, ExecStatus::BuildFailed);
        assert!(outcome.stderr_excerpt.contains("frobnicate"));
    }

    #[test]
    fn timeout_kills_the_process_group() {
        let root = project();
        let backend = CommandBackend::new(root.path(), None, Duration::from_millis(200)).unwrap();
        let scratch = backend
            .prepare(&spec("sleep 30 | cat", "true", "x"))
            .unwrap();
        let started = Instant::now();
        assert_eq!(backend.build(&scratch).unwrap().status, ExecStatus::Timeout);
        assert!(started.elapsed() < Duration::from_secs(10));
    }

    #[test]
    fn test_name_is_substituted() {
        let root = project();
        let backend = CommandBackend::new(root.path(), None, Duration::from_secs(10)).unwrap();
        let scratch = backend
            .prepare(&spec("true", "test {test_name} = newTest", "x"))
            .unwrap();
        assert!(backend.run_test(&scratch, "newTest").unwrap().is_ok());
        assert_eq!(
            backend.run_test(&scratch, "other").unwrap().status,
            ExecStatus::TestFailed
        );
    }

    #[test]
    fn coverage_artifact_is_parsed_relative_and_cleaned() {
        let root = project();
        let backend = CommandBackend::new(root.path(), None, Duration::from_secs(10)).unwrap();
        let cmd = r#"if [ "$TESTGEN_COVERAGE" = 1 ]; then printf 'SF:%s/src/a.kt\nDA:4,1\nDA:5,0\nend_of_record\nSF:src/b.kt\nDA:1,2\nend_of_record\n' "$PWD" > "$TESTGEN_COVERAGE_FILE"; fi"#;
        let scratch = backend
            .prepare(&spec("true", cmd, "cov-{test_name}.info"))
            .unwrap();
        let map = backend.measure_coverage(&scratch, "newTest").unwrap();
        assert_eq!(
            map,
            CoverageMap::from_files([("src/a.kt", vec![4]), ("src/b.kt", vec![1])])
        );
        assert!(!scratch.dir().unwrap().join("cov-newTest.info").exists());
        assert_eq!(backend.measure_coverage(&scratch, "newTest").unwrap(), map);
    }

    #[test]
    fn coverage_errors() {
        let root = project();
        let backend = CommandBackend::new(root.path(), None, Duration::from_secs(10)).unwrap();
        let scratch = backend.prepare(&spec("true", "true", "cov.info")).unwrap();
        assert!(matches!(
            backend.measure_coverage(&scratch, "t"),
            Err(ExecError::ArtifactMissing(_))
        ));
        let scratch = backend
            .prepare(&spec(
                "true",
                "printf 'SF:a\\nDA:zz,1\\n' > cov.info",
                "cov.info",
            ))
            .unwrap();
        assert!(matches!(
            backend.measure_coverage(&scratch, "t"),
            Err(ExecError::ArtifactMalformed { line: 2, .. })
        ));
        let scratch = backend.prepare(&spec("true", "false", "cov.info")).unwrap();
        assert!(matches!(
            backend.measure_coverage(&scratch, "t"),
            Err(ExecError::CoverageRunFailed { .. })
        ));
    }
}
