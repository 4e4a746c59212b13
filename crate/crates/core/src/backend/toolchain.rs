//! External-process backend: `opt` applies pass lists, a compiler emits the
//! unlinked object and assembly, an mca-style analyzer reports static
//! throughput, and an embedding tool prints the 300-number program vector.
//!
//! Every invocation runs under a timeout and is killed rather than letting a
//! wedged tool hang training. Input files are never mutated; transformed
//! modules and tool outputs land in the configured work directory, and
//! embeddings/measurements are cached on disk keyed by the content hash of
//! the IR bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{oz_pipeline, PassId, SubSequence};
use crate::reward::Measurement;

use super::{Backend, BackendError, Baseline, Embedding, IrHandle, IrSource};

/// How object size is taken from the compiled artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeMode {
    /// Total byte size of the unlinked object file (the default).
    FileSize,
    /// Sum of the sizes of allocatable, file-backed ELF sections. A
    /// deviation knob: excludes object-file metadata from the count.
    AllocSections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Optimizer binary; invoked as `opt <args> <pass flags> <input> -o <output>`.
    pub opt: PathBuf,
    pub opt_args: Vec<String>,
    /// Extra optimizer invocation run on every transformed module; a nonzero
    /// exit is reported as invalid IR. Empty disables the check.
    pub verify_args: Vec<String>,
    /// Compiler binary; `-c` for objects, `-S` for the analyzer's assembly.
    pub compiler: PathBuf,
    pub compiler_args: Vec<String>,
    /// Static throughput analyzer; invoked on the generated assembly.
    pub mca: PathBuf,
    pub mca_args: Vec<String>,
    /// Line prefix holding the throughput scalar in the analyzer output.
    pub mca_field: String,
    /// Embedding tool; must print one whitespace-separated 300-number line.
    pub embedder: PathBuf,
    pub embedder_args: Vec<String>,
    /// Appended to compiler invocations as `--target=<triple>` when set.
    pub target_triple: Option<String>,
    /// Per-invocation timeout in seconds; expired tools are killed.
    pub timeout_secs: f64,
    /// Transformed modules and tool scratch files.
    pub work_dir: PathBuf,
    /// Content-hash keyed embedding/measurement cache.
    pub cache_dir: PathBuf,
    pub size_mode: SizeMode,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            opt: "opt".into(),
            opt_args: Vec::new(),
            verify_args: Vec::new(),
            compiler: "clang".into(),
            compiler_args: Vec::new(),
            mca: "llvm-mca".into(),
            mca_args: Vec::new(),
            mca_field: "IPC:".into(),
            embedder: "ir2vec".into(),
            embedder_args: Vec::new(),
            target_triple: None,
            timeout_secs: 60.0,
            work_dir: "ozrl-work".into(),
            cache_dir: "ozrl-cache".into(),
            size_mode: SizeMode::FileSize,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0) {
            return Err(BackendError::ToolFailure {
                tool: "config".into(),
                detail: "timeout must be positive".into(),
            });
        }
        Ok(())
    }
}

pub struct ToolchainBackend {
    cfg: BackendConfig,
    invocations: AtomicU64,
    baseline_cache: Mutex<BTreeMap<String, Baseline>>,
}

impl ToolchainBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.work_dir).map_err(|e| BackendError::Io {
            path: cfg.work_dir.clone(),
            source: e,
        })?;
        fs::create_dir_all(&cfg.cache_dir).map_err(|e| BackendError::Io {
            path: cfg.cache_dir.clone(),
            source: e,
        })?;
        Ok(ToolchainBackend {
            cfg,
            invocations: AtomicU64::new(0),
            baseline_cache: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn ir_path<'a>(&self, ir: &'a IrHandle) -> Result<&'a Path, BackendError> {
        match &ir.source {
            IrSource::File { path } => Ok(path),
            IrSource::Mock { .. } => Err(BackendError::WrongHandle(
                "toolchain backend cannot process mock handles".into(),
            )),
        }
    }

    fn read_ir(&self, ir: &IrHandle) -> Result<Vec<u8>, BackendError> {
        let path = self.ir_path(ir)?;
        fs::read(path).map_err(|e| BackendError::Io { path: path.to_path_buf(), source: e })
    }

    fn content_hash(bytes: &[u8]) -> String {
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        hex_string(&hasher.finalize())
    }

    /// Runs one external tool under the configured timeout, returning its
    /// stdout. Nonzero exit, spawn failure and timeout all surface as
    /// `ToolFailure` carrying the tool name and captured stderr.
    fn run_tool(&self, tool: &Path, args: &[String]) -> Result<String, BackendError> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let fail = |detail: String| BackendError::ToolFailure {
            tool: tool.display().to_string(),
            detail,
        };
        let mut child = Command::new(tool)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("spawn failed: {e}")))?;

        let mut stdout_pipe = child.stdout.take().expect("piped stdout");
        let mut stderr_pipe = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout_pipe.read_to_end(&mut buf);
            buf
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr_pipe.read_to_end(&mut buf);
            buf
        });

        let deadline = Instant::now() + Duration::from_secs_f64(self.cfg.timeout_secs);
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(fail(format!(
                            "timed out after {}s and was killed",
                            self.cfg.timeout_secs
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(fail(format!("wait failed: {e}"))),
            }
        };
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(fail(format!(
                "exit {:?}: {}",
                status.code(),
                String::from_utf8_lossy(&stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&stdout).into_owned())
    }

    fn target_args(&self) -> Vec<String> {
        self.cfg
            .target_triple
            .iter()
            .map(|t| format!("--target={t}"))
            .collect()
    }

    fn work_file(&self, stem: &str, ext: &str) -> PathBuf {
        self.cfg.work_dir.join(format!("{stem}.{ext}"))
    }

    fn apply_flags(&self, ir: &IrHandle, flags: &[String], tag: &str) -> Result<IrHandle, BackendError> {
        let input = self.ir_path(ir)?;
        let bytes = self.read_ir(ir)?;
        // The generation keeps the output path distinct from the input even
        // when the transformation leaves the module bytes unchanged.
        let stem = format!("{tag}_g{}_{}", ir.generation + 1, &Self::content_hash(&bytes)[..16]);
        let output = self.work_file(&stem, "bc");
        let mut args = self.cfg.opt_args.clone();
        args.extend(flags.iter().cloned());
        args.push(input.display().to_string());
        args.push("-o".into());
        args.push(output.display().to_string());
        self.run_tool(&self.cfg.opt, &args)?;

        if !self.cfg.verify_args.is_empty() {
            let mut vargs = self.cfg.verify_args.clone();
            vargs.push(output.display().to_string());
            if let Err(BackendError::ToolFailure { detail, .. }) =
                self.run_tool(&self.cfg.opt, &vargs)
            {
                return Err(BackendError::InvalidIr(detail));
            }
        }
        Ok(IrHandle {
            source: IrSource::File { path: output },
            generation: ir.generation + 1,
        })
    }

    fn measure_uncached(&self, ir: &IrHandle, hash: &str) -> Result<Measurement, BackendError> {
        let input = self.ir_path(ir)?;
        let obj = self.work_file(&format!("m_{}", &hash[..16]), "o");
        let mut cargs = self.cfg.compiler_args.clone();
        cargs.extend(self.target_args());
        cargs.push("-c".into());
        cargs.push(input.display().to_string());
        cargs.push("-o".into());
        cargs.push(obj.display().to_string());
        self.run_tool(&self.cfg.compiler, &cargs)?;

        let obj_bytes =
            fs::read(&obj).map_err(|e| BackendError::Io { path: obj.clone(), source: e })?;
        let bin_size = match self.cfg.size_mode {
            SizeMode::FileSize => obj_bytes.len() as u64,
            SizeMode::AllocSections => {
                alloc_section_size(&obj_bytes).map_err(BackendError::ParseFailure)?
            }
        };

        let asm = self.work_file(&format!("m_{}", &hash[..16]), "s");
        let mut sargs = self.cfg.compiler_args.clone();
        sargs.extend(self.target_args());
        sargs.push("-S".into());
        sargs.push(input.display().to_string());
        sargs.push("-o".into());
        sargs.push(asm.display().to_string());
        self.run_tool(&self.cfg.compiler, &sargs)?;

        let mut margs = self.cfg.mca_args.clone();
        margs.push(asm.display().to_string());
        let mca_out = self.run_tool(&self.cfg.mca, &margs)?;
        let throughput = parse_mca_field(&mca_out, &self.cfg.mca_field)?;

        Ok(Measurement::new(bin_size.max(1), throughput)?)
    }
}

impl Backend for ToolchainBackend {
    fn embed(&self, ir: &IrHandle) -> Result<Embedding, BackendError> {
        let bytes = self.read_ir(ir)?;
        let hash = Self::content_hash(&bytes);
        let cache_path = self.cfg.cache_dir.join(format!("{hash}.embed"));
        if let Ok(text) = fs::read_to_string(&cache_path) {
            if let Ok(e) = parse_embedding(&text) {
                return Ok(e);
            }
        }
        let mut args = self.cfg.embedder_args.clone();
        args.push(self.ir_path(ir)?.display().to_string());
        let stdout = self.run_tool(&self.cfg.embedder, &args)?;
        let embedding = parse_embedding(&stdout)?;
        let rendered = embedding
            .values()
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(" ");
        fs::write(&cache_path, rendered)
            .map_err(|e| BackendError::Io { path: cache_path.clone(), source: e })?;
        Ok(embedding)
    }

    fn apply_passes(&self, ir: &IrHandle, seq: &SubSequence) -> Result<IrHandle, BackendError> {
        let flags: Vec<String> = seq.passes.iter().map(PassId::to_flag).collect();
        self.apply_flags(ir, &flags, &format!("a{}", seq.id))
    }

    fn measure(&self, ir: &IrHandle) -> Result<Measurement, BackendError> {
        let bytes = self.read_ir(ir)?;
        let hash = Self::content_hash(&bytes);
        let mode = match self.cfg.size_mode {
            SizeMode::FileSize => "file",
            SizeMode::AllocSections => "alloc",
        };
        let cache_path = self.cfg.cache_dir.join(format!("{hash}.{mode}.measure.json"));
        if let Ok(text) = fs::read_to_string(&cache_path) {
            if let Ok(m) = serde_json::from_str::<Measurement>(&text) {
                return Ok(m);
            }
        }
        let m = self.measure_uncached(ir, &hash)?;
        let text = serde_json::to_string(&m).expect("measurement serializes");
        fs::write(&cache_path, text)
            .map_err(|e| BackendError::Io { path: cache_path.clone(), source: e })?;
        Ok(m)
    }

    fn baseline(&self, ir: &IrHandle) -> Result<Baseline, BackendError> {
        let bytes = self.read_ir(ir)?;
        let hash = Self::content_hash(&bytes);
        if let Some(hit) = self.baseline_cache.lock().unwrap().get(&hash) {
            return Ok(*hit);
        }
        let unopt = self.measure(ir)?;
        let oz_flags: Vec<String> = oz_pipeline().passes().iter().map(PassId::to_flag).collect();
        let oz_ir = self.apply_flags(ir, &oz_flags, "oz")?;
        let oz = self.measure(&oz_ir)?;
        let baseline = Baseline { unopt, oz };
        self.baseline_cache.lock().unwrap().insert(hash, baseline);
        Ok(baseline)
    }

    fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Finds the analyzer output line starting with `field` and parses the rest
/// as the throughput scalar.
pub fn parse_mca_field(output: &str, field: &str) -> Result<f64, BackendError> {
    for line in output.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix(field) {
            let token = rest.split_whitespace().next().ok_or_else(|| {
                BackendError::ParseFailure(format!("field {field:?} present but empty"))
            })?;
            let value: f64 = token.parse().map_err(|_| {
                BackendError::ParseFailure(format!("field {field:?} value {token:?} is not a number"))
            })?;
            if !(value > 0.0) {
                return Err(BackendError::ParseFailure(format!(
                    "field {field:?} value {value} is not positive"
                )));
            }
            return Ok(value);
        }
    }
    Err(BackendError::ParseFailure(format!(
        "analyzer output has no {field:?} line"
    )))
}

/// Parses one whitespace-separated 300-number line.
pub fn parse_embedding(text: &str) -> Result<Embedding, BackendError> {
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| BackendError::BadVector("embedding tool printed nothing".into()))?;
    let values = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| BackendError::BadVector(format!("bad number {t:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Embedding::new(values)
}

/// Sums `sh_size` over allocatable, file-backed sections of an ELF64
/// little-endian object.
pub fn alloc_section_size(bytes: &[u8]) -> Result<u64, String> {
    const SHF_ALLOC: u64 = 0x2;
    const SHT_NOBITS: u32 = 8;
    if bytes.len() < 64 || &bytes[0..4] != b"\x7fELF" {
        return Err("not an ELF object".into());
    }
    if bytes[4] != 2 || bytes[5] != 1 {
        return Err("only little-endian ELF64 is supported".into());
    }
    let shoff = LittleEndian::read_u64(&bytes[0x28..0x30]) as usize;
    let shentsize = LittleEndian::read_u16(&bytes[0x3a..0x3c]) as usize;
    let shnum = LittleEndian::read_u16(&bytes[0x3c..0x3e]) as usize;
    if shentsize < 0x40 {
        return Err(format!("section header entry size {shentsize} too small"));
    }
    let mut total = 0u64;
    for i in 0..shnum {
        let off = shoff + i * shentsize;
        if off + 0x40 > bytes.len() {
            return Err("section header table out of bounds".into());
        }
        let sh_type = LittleEndian::read_u32(&bytes[off + 0x4..off + 0x8]);
        let sh_flags = LittleEndian::read_u64(&bytes[off + 0x8..off + 0x10]);
        let sh_size = LittleEndian::read_u64(&bytes[off + 0x20..off + 0x28]);
        if sh_flags & SHF_ALLOC != 0 && sh_type != SHT_NOBITS {
            total += sh_size;
        }
    }
    Ok(total)
}
