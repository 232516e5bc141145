use std::collections::HashSet;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use usqm_core::degrade::{apply, calibrate_to_psnr, DegradationKind, DegradationSpec, PsnrTarget};
use usqm_core::error::{Error, Result};
use usqm_core::evalstats::{run_protocol, EvalConfig, Protocol, ProtocolReport};
use usqm_core::features::LayerSet;
use usqm_core::fr::{token_loss_windows, ulpips_windowed};
use usqm_core::image::{psnr, GrayImage, TILE_SIZE};
use usqm_core::nr::{fit_bank, nrq_score, LabeledImage};
use usqm_core::phantom::{speckle_phantom, PhantomStyle};
use usqm_core::store::{
    load_bank, read_json, read_jsonl, resolve, save_bank, to_jsonl, write_atomic, write_json, write_jsonl,
    DegradationRecord, FitManifestEntry,
};
use usqm_core::study::{manifest_salt, pairgen, PairgenConfig};

use crate::config::CliConfig;
use crate::{
    AnalyzeArgs, Cli, Command, DegradeArgs, EvalArgs, FrOverrides, FrScoreArgs, NrOverrides, NrqCommand, NrqFitArgs,
    NrqScoreArgs, PairgenArgs, PhantomArgs, ServeArgs, StudyCommand,
};

pub fn run(cli: Cli) -> Result<()> {
    let env_seed = std::env::var("USQM_SEED").ok();
    let mut cfg = CliConfig::load(cli.config.as_deref(), env_seed.as_deref())?;
    if let Some(e) = &cli.extractor {
        cfg.extractor = e.clone();
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    cfg.verbosity = cfg.verbosity.max(cli.verbose);
    if let Some(cmd) = &cli.command {
        apply_overrides(&mut cfg, cmd);
    }
    if cli.print_config {
        return print_line(&json!({ "config": cfg, "config_hash": cfg.hash() }));
    }
    let Some(cmd) = cli.command else {
        return Err(Error::Parameter("no command given; see `usqm --help`".into()));
    };
    if let Some(jobs) = cfg.jobs {
        if jobs == 0 {
            return Err(Error::Parameter("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    }
    match cmd {
        Command::FrScore(a) => fr_score(&cfg, &a),
        Command::Nrq(NrqCommand::Fit(a)) => nrq_fit(&cfg, &a),
        Command::Nrq(NrqCommand::Score(a)) => nrq_score_cmd(&cfg, &a),
        Command::Degrade(a) => degrade(&cfg, &a),
        Command::Phantom(a) => phantom(&cfg, &a),
        Command::Eval(a) => eval(&cfg, &a),
        Command::Study(StudyCommand::Pairgen(a)) => study_pairgen(&cfg, &a),
        Command::Study(StudyCommand::Serve(a)) => study_serve(&a),
        Command::Study(StudyCommand::Analyze(a)) => study_analyze(&cfg, &a),
    }
}

fn apply_fr(cfg: &mut CliConfig, o: &FrOverrides) {
    if let Some(l) = &o.layers {
        cfg.fr.layers = LayerSet::new(l.iter().copied());
    }
    if let Some(r) = o.radius {
        cfg.fr.radius = r;
    }
    if let Some(t) = o.temperature {
        cfg.fr.temperature = t;
    }
    if let Some(s) = o.window_stride {
        cfg.fr.window_stride = s;
    }
}

fn apply_nr(cfg: &mut CliConfig, o: &NrOverrides) {
    if let Some(l) = &o.layers {
        cfg.nr.layers = LayerSet::new(l.iter().copied());
    }
    if let Some(d) = o.pca_dim {
        cfg.nr.pca_dim = d;
    }
    if let Some(k) = o.components {
        cfg.nr.components = k;
    }
    if let Some(s) = o.seed {
        cfg.nr.seed = s;
    }
    if let Some(f) = o.worst_fraction {
        cfg.nr.worst_fraction = f;
    }
    if let Some(s) = o.stride {
        cfg.nr.stride = s;
    }
}

fn apply_overrides(cfg: &mut CliConfig, cmd: &Command) {
    match cmd {
        Command::FrScore(a) => apply_fr(cfg, &a.fr),
        Command::Nrq(NrqCommand::Fit(a)) => apply_nr(cfg, &a.nr),
        Command::Degrade(DegradeArgs { out_dir: Some(d), .. })
        | Command::Phantom(PhantomArgs { out_dir: Some(d), .. })
        | Command::Eval(EvalArgs { out_dir: Some(d), .. })
        | Command::Study(StudyCommand::Analyze(AnalyzeArgs { out_dir: Some(d), .. })) => {
            cfg.out_dir = Some(d.clone());
        }
        _ => {}
    }
}

fn print_line(v: &impl serde::Serialize) -> Result<()> {
    let mut line = serde_json::to_vec(v)?;
    line.push(b'\n');
    std::io::stdout()
        .lock()
        .write_all(&line)
        .map_err(|e| Error::io("<stdout>", e))
}

fn out_dir(cfg: &CliConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
}

/// A single file, or the PNG/PGM files of a directory in name order.
fn list_images(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(input).map_err(|e| Error::io(input, e))? {
        let p = entry.map_err(|e| Error::io(input, e))?.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::InsufficientData(format!("no PNG or PGM images in {}", input.display())));
    }
    Ok(out)
}

/// Runs `f` over `items` concurrently, returning results in input order and
/// the first error in input order.
fn ordered<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    let results: Vec<Result<U>> = items.par_iter().map(f).collect();
    results.into_iter().collect()
}

fn fr_score(cfg: &CliConfig, a: &FrScoreArgs) -> Result<()> {
    cfg.fr.validate()?;
    let ex = cfg.extractor()?;
    ex.profile().check_layers(&cfg.fr.layers)?;
    let x = GrayImage::load(&a.reference)?;
    let y = GrayImage::load(&a.test)?;
    let (breakdown, windows) = ulpips_windowed(&x, &y, &cfg.fr, ex.as_ref())?;
    let upscaled = x.height().min(x.width()) < TILE_SIZE;
    let mut out = serde_json::to_value(&breakdown)?;
    let obj = out.as_object_mut().expect("object");
    obj.insert("reference".into(), json!(a.reference.display().to_string()));
    obj.insert("test".into(), json!(a.test.display().to_string()));
    if a.token_loss {
        let (loss, _) = token_loss_windows(&x, &y, &cfg.fr, ex.as_ref())?;
        obj.insert("token_loss".into(), json!(loss));
    }
    obj.insert(
        "provenance".into(),
        json!({
            "config_hash": cfg.hash(),
            "extractor": ex.fingerprint(),
            "input_size": [x.height(), x.width()],
            "upscaled": upscaled,
            "windows": windows,
        }),
    );
    print_line(&out)
}

fn nrq_fit(cfg: &CliConfig, a: &NrqFitArgs) -> Result<()> {
    let ex = cfg.extractor()?;
    let entries: Vec<FitManifestEntry> = read_jsonl(&a.manifest)?;
    let samples = ordered(&entries, |e| {
        Ok(LabeledImage {
            image: GrayImage::load(resolve(&a.manifest, &e.path))?,
            organ: e.organ.clone(),
        })
    })?;
    let (mut bank, report) = fit_bank(&samples, ex.as_ref(), &cfg.nr)?;
    bank.config_hash = cfg.hash();
    save_bank(&bank, &a.out)?;
    for o in report.organs.iter().filter(|o| o.excluded.is_some()) {
        log::warn!("organ `{}` excluded: {}", o.organ, o.excluded.as_deref().unwrap_or(""));
    }
    print_line(&json!({
        "bank": a.out.display().to_string(),
        "organs": bank.organ_names(),
        "fit": report,
        "fingerprint": bank.fingerprint,
        "config_hash": bank.config_hash,
    }))
}

fn nrq_score_cmd(cfg: &CliConfig, a: &NrqScoreArgs) -> Result<()> {
    let ex = cfg.extractor()?;
    let bank = load_bank(&a.bank)?;
    if let Some(o) = &a.organ {
        if !bank.organs.contains_key(o) {
            return Err(Error::UnknownOrgan(o.clone()));
        }
    }
    let strict = cfg.nr.strict_fingerprint && !a.allow_fingerprint_mismatch;
    bank.check_extractor(ex.as_ref(), strict)?;
    let images = list_images(&a.input)?;
    let lines = ordered(&images, |p| {
        let img = GrayImage::load(p)?;
        let r = nrq_score(&img, &bank, a.organ.as_deref(), ex.as_ref(), strict)?;
        let mut v = serde_json::to_value(&r)?;
        let obj = v.as_object_mut().expect("object");
        obj.insert("path".into(), json!(p.display().to_string()));
        obj.insert("worst_origins".into(), json!(r.worst_origins()));
        obj.insert("config_hash".into(), json!(bank.config_hash));
        Ok(v)
    })?;
    match &a.out {
        Some(path) => write_atomic(path, to_jsonl(&lines)?.as_bytes()),
        None => lines.iter().try_for_each(print_line),
    }
}

fn parse_kinds(names: &[String]) -> Result<Vec<DegradationKind>> {
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend_from_slice(DegradationKind::defaults());
        } else {
            out.push(n.parse()?);
        }
    }
    let mut seen = HashSet::new();
    out.retain(|k| seen.insert(*k));
    Ok(out)
}

fn degrade(cfg: &CliConfig, a: &DegradeArgs) -> Result<()> {
    let kinds = parse_kinds(&a.kind)?;
    let images = list_images(&a.input)?;
    let dir = out_dir(cfg);
    enum Level {
        Target(f64),
        Theta(f64),
    }
    let levels: Vec<Level> = match (&a.target_psnr, a.theta) {
        (Some(t), None) => t.iter().map(|&v| Level::Target(v)).collect(),
        (None, Some(theta)) => vec![Level::Theta(theta)],
        _ => return Err(Error::Parameter("give exactly one of --target-psnr and --theta".into())),
    };
    let mut jobs = Vec::new();
    for i in 0..images.len() {
        for &k in &kinds {
            for l in &levels {
                jobs.push((i, k, l));
            }
        }
    }
    let loaded = ordered(&images, |p| GrayImage::load(p))?;
    let records = ordered(&jobs, |&(i, kind, level)| {
        let img = &loaded[i];
        let stem = images[i].file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let (out, theta, achieved, tag) = match *level {
            Level::Target(t) => {
                let target = PsnrTarget {
                    tolerance: a.tolerance,
                    ..PsnrTarget::new(t)
                };
                let c = calibrate_to_psnr(img, kind, a.seed, &target)?;
                if !c.converged {
                    log::warn!(
                        "{}: {kind} reached {} dB for target {t} after {} iterations",
                        images[i].display(),
                        c.achieved,
                        c.iterations
                    );
                }
                (c.image, c.theta, c.achieved, format!("psnr{t}"))
            }
            Level::Theta(theta) => {
                let out = apply(img, &DegradationSpec::new(kind, theta, a.seed))?;
                let achieved = psnr(img, &out)?;
                (out, theta, achieved, format!("theta{theta}"))
            }
        };
        let name = format!("{stem}_{kind}_{tag}.png");
        out.save_png(dir.join(&name))?;
        Ok(DegradationRecord {
            source: images[i].display().to_string(),
            kind: kind.name().into(),
            theta,
            seed: a.seed,
            achieved_psnr: achieved,
            output_path: name,
        })
    })?;

    let manifest = dir.join("degradations.json");
    let mut all: Vec<DegradationRecord> = if manifest.exists() { read_json(&manifest)? } else { Vec::new() };
    let fresh: HashSet<&str> = records.iter().map(|r| r.output_path.as_str()).collect();
    all.retain(|r| !fresh.contains(r.output_path.as_str()));
    all.extend(records.iter().cloned());
    write_json(&all, &manifest)?;
    records.iter().try_for_each(print_line)
}

fn phantom(cfg: &CliConfig, a: &PhantomArgs) -> Result<()> {
    let style = match a.style.as_str() {
        "default" => PhantomStyle::default(),
        "fine" => PhantomStyle::fine(),
        "coarse" => PhantomStyle::coarse(),
        s => return Err(Error::Parameter(format!("unknown phantom style `{s}`; expected default, fine or coarse"))),
    };
    let dir = out_dir(cfg);
    let prefix = a.organ.clone().unwrap_or_else(|| "phantom".into());
    let seeds: Vec<u64> = (0..a.count as u64).map(|i| a.seed + i).collect();
    let names = ordered(&seeds, |&seed| {
        let img = speckle_phantom(a.height, a.width, seed, &style)?;
        let name = format!("{prefix}_{seed:06}.png");
        img.save_png(dir.join(&name))?;
        Ok(name)
    })?;
    if let Some(organ) = &a.organ {
        let manifest = dir.join("manifest.jsonl");
        let mut entries: Vec<FitManifestEntry> = if manifest.exists() { read_jsonl(&manifest)? } else { Vec::new() };
        let fresh: HashSet<&str> = names.iter().map(String::as_str).collect();
        entries.retain(|e| !fresh.contains(e.path.as_str()));
        entries.extend(names.iter().map(|n| FitManifestEntry {
            path: n.clone(),
            organ: organ.clone(),
        }));
        write_jsonl(&entries, &manifest)?;
    }
    print_line(&json!({ "out_dir": dir.display().to_string(), "images": names }))
}

fn write_report(report: &ProtocolReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let json_path = dir.join(format!("{}.json", report.protocol.name()));
    let md_path = dir.join(format!("{}.md", report.protocol.name()));
    write_json(report, &json_path)?;
    write_atomic(&md_path, report.to_markdown().as_bytes())?;
    Ok((json_path, md_path))
}

fn eval(cfg: &CliConfig, a: &EvalArgs) -> Result<()> {
    let protocol: Protocol = a.protocol.parse()?;
    let ecfg = EvalConfig {
        level: a.level,
        p0: a.p0,
        seeds: a.seeds.clone(),
    };
    let report = run_protocol(protocol, &a.inputs, &ecfg)?;
    let (json_path, md_path) = write_report(&report, &out_dir(cfg))?;
    eprintln!("{}", report.summary_row());
    print_line(&json!({
        "protocol": protocol.name(),
        "aggregate": report.aggregate,
        "config_hash": report.provenance.config_hash,
        "report": json_path.display().to_string(),
        "markdown": md_path.display().to_string(),
    }))
}

fn canonical(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn study_pairgen(_cfg: &CliConfig, a: &PairgenArgs) -> Result<()> {
    let records: Vec<DegradationRecord> = read_json(&a.manifest)?;
    let pcfg = PairgenConfig {
        n_pairs: a.n_pairs,
        sanity_fraction: a.sanity_fraction,
        seed: a.seed,
        psnr_tolerance: a.psnr_tolerance,
        duplicates: a.duplicates,
        balanced: !a.unbalanced,
        readers: a.readers.clone(),
    };
    let (mut pairs, summary) = pairgen(&records, &pcfg)?;
    let out_parent = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(out_parent).map_err(|e| Error::io(out_parent, e))?;
    let manifest_parent = a.manifest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if canonical(out_parent) != canonical(manifest_parent) {
        // image paths are stored relative to the pair manifest's directory
        for p in pairs.iter_mut() {
            for img in [&mut p.a, &mut p.b] {
                img.path = canonical(&resolve(&a.manifest, &img.path)).display().to_string();
            }
        }
    }
    write_json(&pairs, &a.out)?;
    print_line(&json!({
        "pairs": a.out.display().to_string(),
        "summary": summary,
        "config": pcfg,
    }))
}

fn study_serve(a: &ServeArgs) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::Parameter(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let bytes = std::fs::read(&a.pairs).map_err(|e| Error::io(&a.pairs, e))?;
    let cfg = usqm_study_server::ServeConfig {
        pairs: a.pairs.clone(),
        responses: a.responses.clone(),
        addr,
        assets: a.assets.clone(),
        salt: manifest_salt(&bytes),
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(usqm_study_server::serve(cfg))
}

fn study_analyze(cfg: &CliConfig, a: &AnalyzeArgs) -> Result<()> {
    let ecfg = EvalConfig {
        level: a.level,
        ..EvalConfig::default()
    };
    let inputs = [a.pairs.clone(), a.responses.clone(), a.scores.clone()];
    let report = run_protocol(Protocol::AfcAgreement, &inputs, &ecfg)?;
    if cfg.out_dir.is_some() {
        write_report(&report, &out_dir(cfg))?;
    }
    eprintln!("{}", report.summary_row());
    let v: Value = serde_json::to_value(&report)?;
    print_line(&v)
}
