use std::fs;
use std::path::{Path, PathBuf};

use occrec::encoder::{encode_dataset, train_encoder, EncoderParams};
use occrec::eval::{representations, run_variant, write_csv, EvalOptions, EvalReport, Variant, VariantParams};
use occrec::gradcheck::{
    check_encoder, check_gnn, check_gnn_inputs, random_encoder_batch, random_gnn_instance, CheckReport,
};
use occrec::io::{read_feature_file_as, write_atomic, write_feature_file};
use occrec::neighborhood::{build_index, image_neighborhood};
use occrec::occlusion::{estimate_visibility, BodyMask, PartLayout, RleMask};
use occrec::orgnn::{train_orgnn, GnnOptions, OrgnnParams};
use occrec::synth::{generate, generate_masks, raw_view, SynthSpec};
use occrec::{Dataset, PartFeatureSet, PipelineConfig, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::*;
use crate::manifest::RunManifest;
use crate::CliError;

type Res<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> Res {
    let global = &cli.global;
    let cfg = global.resolve_config()?;
    if let Some(n) = global.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Gen(a) => gen(global, &cfg, a),
        Command::Masks(a) => masks(global, &cfg, a),
        Command::Encode(a) => encode(global, &cfg, a),
        Command::Occlusion(a) => occlusion(global, &cfg, a),
        Command::Index(a) => index(global, &cfg, a),
        Command::Neighbors(a) => neighbors(global, &cfg, a),
        Command::TrainEncoder(a) => train_enc(global, &cfg, a),
        Command::TrainGnn(a) => train_gnn(global, &cfg, a),
        Command::Reconstruct(a) => reconstruct(global, &cfg, a),
        Command::Eval(a) => eval(global, &cfg, a),
        Command::Ablate(a) => ablate(global, &cfg, a),
        Command::Gradcheck(a) => gradcheck(global, &cfg, a),
    }
}

fn require(path: &Path) -> Res {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("input not found: {} (check the path)", path.display())))
    }
}

fn read_features(path: &Path, split: Split, m: &mut RunManifest) -> Res<Dataset> {
    require(path)?;
    m.input(path)?;
    read_feature_file_as(path, split).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_gnn(path: &Path, m: &mut RunManifest) -> Res<OrgnnParams> {
    require(path)?;
    m.input(path)?;
    OrgnnParams::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn parse_variant(s: &str) -> Res<Variant> {
    s.parse()
        .map_err(|_| CliError::usage(format!("unknown variant {s:?}; expected one of {}", variant_list())))
}

fn variant_list() -> String {
    Variant::ALL.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(", ")
}

fn write_json(path: &Path, value: &impl Serialize) -> Res {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Res {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::data(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn gen(global: &GlobalArgs, cfg: &PipelineConfig, a: &GenArgs) -> Res {
    let mut man = RunManifest::new("gen", cfg, global.threads);
    let mut spec = match &a.spec {
        Some(p) => {
            require(p)?;
            man.input(p)?;
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec {
            m: cfg.m,
            ..SynthSpec::default()
        },
    };
    spec.seed = cfg.seed;
    if let Some(v) = a.identities {
        spec.num_identities = v;
    }
    if let Some(v) = a.images_per_identity {
        spec.images_per_identity = v;
    }
    if let Some(v) = a.occlusion_rate {
        spec.occlusion_rate = v;
    }
    if let Some(v) = a.obstacle_clusters {
        spec.num_obstacle_clusters = v;
    }
    if let Some(v) = a.dim {
        spec.d = v;
    }
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let data = man.stage("generate", || generate(&spec))?;
    fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    for ds in [&data.train, &data.query, &data.gallery] {
        let path = a.out.join(format!("{}.feat", ds.split.as_str()));
        write_feature_file(ds, &path)?;
        written.push(path);
    }
    let truth = a.out.join("truth.json");
    write_json(&truth, &data.truth)?;
    written.push(truth);
    if a.raw {
        let (rt, rq, rg) = man.stage("raw view", || raw_view(&spec, &data))?;
        for ds in [&rt, &rq, &rg] {
            let path = a.out.join(format!("raw_{}.feat", ds.split.as_str()));
            write_feature_file(ds, &path)?;
            written.push(path);
        }
    }
    for p in &written {
        man.output(p)?;
    }
    man.note("spec", &spec);
    man.note("separation", data.truth.separation);
    man.write(&manifest_path(global, &a.out, true))?;
    println!(
        "train {} / query {} / gallery {} images -> {}",
        data.train.len(),
        data.query.len(),
        data.gallery.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct MaskTruthLine<'a> {
    id: &'a str,
    file: String,
    visible: &'a [bool],
}

fn masks(global: &GlobalArgs, cfg: &PipelineConfig, a: &MasksArgs) -> Res {
    if !(0.0..=1.0).contains(&a.occlusion_rate) {
        return Err(CliError::usage("--occlusion-rate must lie in [0, 1]"));
    }
    let mut man = RunManifest::new("masks", cfg, global.threads);
    let fixtures = man.stage("generate", || generate_masks(a.count, a.occlusion_rate, cfg.seed))?;
    fs::create_dir_all(&a.out)?;
    let mut truth = Vec::with_capacity(fixtures.len());
    for f in &fixtures {
        let file = format!("{}.pgm", f.id);
        let path = a.out.join(&file);
        write_atomic(&path, &f.mask.encode_pgm())?;
        man.output(&path)?;
        truth.push(MaskTruthLine {
            id: &f.id,
            file,
            visible: &f.truth,
        });
    }
    let truth_path = a.out.join("masks.jsonl");
    write_lines(&truth_path, &truth)?;
    man.output(&truth_path)?;
    man.write(&manifest_path(global, &a.out, true))?;
    println!("{} masks -> {}", fixtures.len(), a.out.display());
    Ok(())
}

fn encode(global: &GlobalArgs, cfg: &PipelineConfig, a: &EncodeArgs) -> Res {
    let mut man = RunManifest::new("encode", cfg, global.threads);
    let raw = read_features(&a.input, occrec::io::split_from_path(&a.input), &mut man)?;
    require(&a.encoder)?;
    man.input(&a.encoder)?;
    let params = EncoderParams::load(&a.encoder)?;
    let out = man.stage("encode", || encode_dataset(&raw, &params))?;
    write_feature_file(&out, &a.out)?;
    man.output(&a.out)?;
    man.write(&manifest_path(global, &a.out, false))?;
    println!("{} images encoded to D={} -> {}", out.len(), out.dim(), a.out.display());
    Ok(())
}

fn mask_files(inputs: &[PathBuf]) -> Res<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    // run manifests sit next to generated masks
                    let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    !name.ends_with("manifest.json")
                })
                .filter(|f| {
                    f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("json"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            require(p)?;
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::data("no .pgm or .json masks found in the given paths"));
    }
    Ok(files)
}

fn read_mask(path: &Path) -> Res<BodyMask> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = fs::read_to_string(path)?;
        let rle: RleMask = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        BodyMask::from_rle(&rle).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    } else {
        BodyMask::read_pgm(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

#[derive(Serialize)]
struct VisibilityLine {
    mask: String,
    scores: Vec<f64>,
    visible: Vec<bool>,
    empty_mask: bool,
}

fn occlusion(global: &GlobalArgs, cfg: &PipelineConfig, a: &OcclusionArgs) -> Res {
    let mut man = RunManifest::new("occlusion", cfg, global.threads);
    let files = mask_files(&a.masks)?;
    let mut lines = Vec::with_capacity(files.len());
    for f in &files {
        man.input(f)?;
        let mask = read_mask(f)?;
        let layout = PartLayout::standard(mask.height(), mask.width())
            .map_err(|e| CliError::data(format!("{}: {e}", f.display())))?;
        let state = estimate_visibility(&mask, &layout)?;
        lines.push(VisibilityLine {
            mask: f.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string(),
            scores: state.scores,
            visible: state.mask,
            empty_mask: state.empty_mask,
        });
    }
    write_lines(&a.out, &lines)?;
    man.output(&a.out)?;
    if let (Some(input), Some(out)) = (&a.apply, &a.apply_out) {
        let split = occrec::io::split_from_path(input);
        let ds = read_features(input, split, &mut man)?;
        let mut matched = 0;
        let items = ds
            .items()
            .iter()
            .map(|it| match lines.iter().find(|l| l.mask == it.image_id) {
                Some(l) if l.scores.len() == it.parts() => {
                    matched += 1;
                    PartFeatureSet::new(
                        it.image_id.clone(),
                        it.person_id,
                        it.camera_id,
                        it.parts(),
                        it.dim(),
                        it.features().to_vec(),
                        l.scores.clone(),
                    )
                }
                _ => Ok(it.clone()),
            })
            .collect::<occrec::Result<Vec<_>>>()?;
        let updated = Dataset::new(ds.split, ds.parts(), ds.dim(), items)?;
        write_feature_file(&updated, out)?;
        man.output(out)?;
        man.note("matched_images", matched);
        println!("visibility applied to {matched} of {} images -> {}", ds.len(), out.display());
    }
    man.write(&manifest_path(global, &a.out, false))?;
    println!("{} masks -> {}", lines.len(), a.out.display());
    Ok(())
}

fn index(global: &GlobalArgs, cfg: &PipelineConfig, a: &IndexArgs) -> Res {
    let mut man = RunManifest::new("index", cfg, global.threads);
    let gallery = read_features(&a.gallery, Split::Gallery, &mut man)?;
    let idx = man.stage("index", || build_index(&gallery))?;
    let rows: Vec<usize> = (0..idx.parts()).map(|p| idx.part_rows(p)).collect();
    write_feature_file(&gallery.normalized()?, &a.out)?;
    man.output(&a.out)?;
    man.note("part_rows", &rows);
    man.write(&manifest_path(global, &a.out, false))?;
    println!("{} gallery images; visible rows per part {rows:?} -> {}", idx.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct NeighborLine {
    query: String,
    members: Vec<String>,
    fallback: bool,
}

fn neighbors(global: &GlobalArgs, cfg: &PipelineConfig, a: &NeighborsArgs) -> Res {
    let mut man = RunManifest::new("neighbors", cfg, global.threads);
    let query = read_features(&a.query, Split::Query, &mut man)?.normalized()?;
    let gallery = read_features(&a.gallery, Split::Gallery, &mut man)?;
    let (k, theta) = if a.training {
        (cfg.k_train, cfg.theta_train)
    } else {
        (cfg.k_infer, cfg.theta_infer)
    };
    let idx = build_index(&gallery)?;
    let lines = man.stage("neighborhoods", || {
        query
            .items()
            .par_iter()
            .map(|q| {
                if q.num_visible() == 0 {
                    return Ok(NeighborLine {
                        query: q.image_id.clone(),
                        members: Vec::new(),
                        fallback: true,
                    });
                }
                let ns = image_neighborhood(&idx, q, k, theta)?;
                Ok(NeighborLine {
                    query: q.image_id.clone(),
                    members: ns.member_ids().iter().map(|s| s.to_string()).collect(),
                    fallback: ns.fallback,
                })
            })
            .collect::<occrec::Result<Vec<_>>>()
    })?;
    write_lines(&a.out, &lines)?;
    man.output(&a.out)?;
    let fallbacks = lines.iter().filter(|l| l.fallback).count();
    man.note("fallbacks", fallbacks);
    man.write(&manifest_path(global, &a.out, false))?;
    println!("{} queries, {fallbacks} fallbacks -> {}", lines.len(), a.out.display());
    Ok(())
}

fn train_enc(global: &GlobalArgs, cfg: &PipelineConfig, a: &TrainEncoderArgs) -> Res {
    let mut man = RunManifest::new("train-encoder", cfg, global.threads);
    let train = read_features(&a.train, Split::Train, &mut man)?;
    let out = man.stage("train", || train_encoder(&train, cfg.d, cfg))?;
    out.params.save(&a.out)?;
    man.output(&a.out)?;
    man.note("epoch_losses", &out.epoch_losses);
    man.write(&manifest_path(global, &a.out, false))?;
    println!(
        "encoder {}x{} over {} parts, final loss {:?} -> {}",
        out.params.d_raw(),
        out.params.d(),
        out.params.parts(),
        out.epoch_losses.last(),
        a.out.display()
    );
    Ok(())
}

fn gnn_options(kind: GnnKind) -> GnnOptions {
    match kind {
        GnnKind::Orgnn => GnnOptions::OUTLIER_REMOVABLE,
        GnnKind::Gnn => GnnOptions::PLAIN,
    }
}

/// Trains and writes a checkpoint after every epoch. Returns the epoch
/// losses.
fn train_checkpointed(train: &Dataset, cfg: &PipelineConfig, kind: GnnKind, out: &Path) -> Res<Vec<f64>> {
    let mut last_good = None;
    let res = train_orgnn(train, cfg, &gnn_options(kind), |epoch, _, params| {
        params.save(out)?;
        last_good = Some(epoch);
        Ok(())
    });
    match res {
        Ok(t) => {
            t.params.save(out)?;
            Ok(t.epoch_losses)
        }
        Err(e @ occrec::Error::Diverged { .. }) => Err(CliError::data(match last_good {
            Some(ep) => format!("{e}; {} holds epoch {ep}; lower --learning-rate", out.display()),
            None => format!("{e}; no checkpoint written; lower --learning-rate"),
        })),
        Err(e) => Err(e.into()),
    }
}

fn train_gnn(global: &GlobalArgs, cfg: &PipelineConfig, a: &TrainGnnArgs) -> Res {
    let mut man = RunManifest::new("train-gnn", cfg, global.threads);
    let train = read_features(&a.train, Split::Train, &mut man)?;
    let losses = man.stage("train", || train_checkpointed(&train, cfg, a.kind, &a.out))?;
    man.output(&a.out)?;
    man.note("kind", format!("{:?}", a.kind).to_lowercase());
    man.note("epoch_losses", &losses);
    man.write(&manifest_path(global, &a.out, false))?;
    println!("{} epochs, final loss {:?} -> {}", losses.len(), losses.last(), a.out.display());
    Ok(())
}

fn variant_params(variant: Variant, orgnn: Option<OrgnnParams>, gnn: Option<OrgnnParams>) -> VariantParams {
    match variant {
        Variant::OanGnn | Variant::GnnNoOan => VariantParams { orgnn: None, gnn },
        _ => VariantParams { orgnn, gnn: None },
    }
}

fn reconstruct(global: &GlobalArgs, cfg: &PipelineConfig, a: &ReconstructArgs) -> Res {
    let mut man = RunManifest::new("reconstruct", cfg, global.threads);
    let variant = parse_variant(&a.variant)?;
    if variant.gnn_options().is_none() {
        return Err(CliError::usage(format!("variant {variant} does not reconstruct features")));
    }
    let query = read_features(&a.query, Split::Query, &mut man)?;
    let gallery = read_features(&a.gallery, Split::Gallery, &mut man)?;
    let params = match &a.gnn {
        Some(p) => Some(load_gnn(p, &mut man)?),
        None if variant == Variant::OanAvgAgg => None,
        None => return Err(CliError::usage(format!("variant {variant} needs --gnn <checkpoint>"))),
    };
    let vp = variant_params(variant, params.clone(), params);
    let reps = man.stage("reconstruct", || {
        representations(variant, &query, &gallery, &vp, cfg, &EvalOptions::default())
    })?;
    let (m, d) = (query.parts(), query.dim());
    let items = query
        .items()
        .iter()
        .zip(&reps.query)
        .map(|(q, rep)| {
            let vis = (0..m)
                .map(|p| if rep[p * d..(p + 1) * d].iter().any(|&v| v != 0.0) { 1.0 } else { 0.0 })
                .collect();
            let feats = rep.iter().map(|&v| v as f32).collect();
            PartFeatureSet::new(q.image_id.clone(), q.person_id, q.camera_id, m, d, feats, vis)
        })
        .collect::<occrec::Result<Vec<_>>>()?;
    let out = Dataset::new(query.split, m, d, items)?;
    write_feature_file(&out, &a.out)?;
    man.output(&a.out)?;
    let fallbacks = reps.query_fallback.iter().filter(|&&f| f).count();
    man.note("fallbacks", fallbacks);
    man.write(&manifest_path(global, &a.out, false))?;
    println!("{} reconstructed, {fallbacks} fallbacks -> {}", out.len(), a.out.display());
    Ok(())
}

fn eval_options(f: &EvalFlags) -> EvalOptions {
    EvalOptions {
        reconstruct_gallery: !f.no_reconstruct_gallery,
        junk_filter: f.junk_filter,
    }
}

fn eval(global: &GlobalArgs, cfg: &PipelineConfig, a: &EvalArgs) -> Res {
    let mut man = RunManifest::new("eval", cfg, global.threads);
    let variant = parse_variant(&a.variant)?;
    let query = read_features(&a.query, Split::Query, &mut man)?;
    let gallery = read_features(&a.gallery, Split::Gallery, &mut man)?;
    let orgnn = a.orgnn.as_deref().map(|p| load_gnn(p, &mut man)).transpose()?;
    let gnn = a.gnn.as_deref().map(|p| load_gnn(p, &mut man)).transpose()?;
    let vp = variant_params(variant, orgnn, gnn);
    let report = man.stage("eval", || run_variant(variant, &query, &gallery, &vp, cfg, &eval_options(&a.flags)))?;
    report.save(&a.out)?;
    man.output(&a.out)?;
    if let Some(csv) = &a.csv {
        write_csv(std::slice::from_ref(&report), csv)?;
        man.output(csv)?;
    }
    man.write(&manifest_path(global, &a.out, false))?;
    println!("{}", report.csv_row());
    Ok(())
}

fn report_file_name(v: Variant) -> String {
    format!("{}.json", v.as_str().replace('+', "_"))
}

fn ablate(global: &GlobalArgs, cfg: &PipelineConfig, a: &AblateArgs) -> Res {
    let mut man = RunManifest::new("ablate", cfg, global.threads);
    let query = read_features(&a.query, Split::Query, &mut man)?;
    let gallery = read_features(&a.gallery, Split::Gallery, &mut man)?;
    fs::create_dir_all(&a.out)?;
    let train = match &a.train {
        Some(p) => Some(read_features(p, Split::Train, &mut man)?),
        None => None,
    };
    let obtain = |given: &Option<PathBuf>, kind: GnnKind, man: &mut RunManifest| -> Res<OrgnnParams> {
        if let Some(p) = given {
            return load_gnn(p, man);
        }
        let train = train
            .as_ref()
            .ok_or_else(|| CliError::usage("ablate needs --train or both --orgnn and --gnn checkpoints"))?;
        let name = format!("{:?}", kind).to_lowercase();
        let path = a.out.join(format!("{name}.bin"));
        let losses = man.stage(&format!("train {name}"), || train_checkpointed(train, cfg, kind, &path))?;
        man.output(&path)?;
        man.note(&format!("{name}_epoch_losses"), &losses);
        OrgnnParams::load(&path).map_err(CliError::from)
    };
    let vp = VariantParams {
        orgnn: Some(obtain(&a.orgnn, GnnKind::Orgnn, &mut man)?),
        gnn: Some(obtain(&a.gnn, GnnKind::Gnn, &mut man)?),
    };
    let opts = eval_options(&a.flags);
    let mut reports: Vec<EvalReport> = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        let r = man.stage(v.as_str(), || run_variant(v, &query, &gallery, &vp, cfg, &opts))?;
        let path = a.out.join(report_file_name(v));
        r.save(&path)?;
        man.output(&path)?;
        reports.push(r);
    }
    let csv = a.out.join("ablation.csv");
    write_csv(&reports, &csv)?;
    man.output(&csv)?;
    man.write(&manifest_path(global, &a.out, true))?;
    print!("{}", fs::read_to_string(&csv)?);
    Ok(())
}

#[derive(Serialize)]
struct CheckLine {
    check: String,
    instances: usize,
    checked: usize,
    skipped: usize,
    max_rel_error: f64,
    pass: bool,
}

fn gradcheck(global: &GlobalArgs, cfg: &PipelineConfig, a: &GradcheckArgs) -> Res {
    if a.instances == 0 || a.dim == 0 || a.neighbors == 0 || a.parts == 0 || !(a.step > 0.0) {
        return Err(CliError::usage("gradcheck sizes and --step must be positive"));
    }
    let mut man = RunManifest::new("gradcheck", cfg, global.threads);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_ids = 5;
    let mut lines = Vec::new();
    let mut record = |name: &str, r: CheckReport| {
        lines.push(CheckLine {
            check: name.into(),
            instances: a.instances,
            checked: r.checked,
            skipped: r.skipped,
            max_rel_error: r.max_rel_error,
            pass: r.passes(a.tolerance),
        });
    };
    for (name, opts) in [("orgnn", GnnOptions::OUTLIER_REMOVABLE), ("gnn", GnnOptions::PLAIN)] {
        let mut params = CheckReport::default();
        let mut inputs = CheckReport::default();
        for _ in 0..a.instances {
            let inst = random_gnn_instance(&mut rng, a.dim, a.neighbors, a.parts, cfg.t, num_ids);
            params.merge(&check_gnn(&inst, &opts, a.step)?);
            inputs.merge(&check_gnn_inputs(&inst, 0, &opts, a.step)?);
        }
        record(&format!("{name} parameters"), params);
        record(&format!("{name} inputs"), inputs);
    }
    let mut enc = CheckReport::default();
    for i in 0..a.instances {
        let batch = random_encoder_batch(&mut rng, 2, 6)?;
        let params = EncoderParams::init(2, 6, 4, 3, cfg.seed.wrapping_add(i as u64));
        enc.merge(&check_encoder(&batch, &params, 1.0, a.step)?);
    }
    record("encoder parameters", enc);
    for l in &lines {
        println!(
            "{} {}: {} coordinates, {} skipped at kinks, max relative error {:.3e}",
            if l.pass { "PASS" } else { "FAIL" },
            l.check,
            l.checked,
            l.skipped,
            l.max_rel_error
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &lines)?;
        man.output(out)?;
        man.write(&manifest_path(global, out, false))?;
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    if failed > 0 {
        return Err(CliError::data(format!(
            "{failed} gradient check(s) exceed tolerance {:e}",
            a.tolerance
        )));
    }
    Ok(())
}
