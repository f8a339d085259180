use std::fs;
use std::path::{Path, PathBuf};

use a2r_core::ann::{self, Probe};
use a2r_core::bank::{build_banks, BankOptions, Storage};
use a2r_core::cxloss::{
    cx_loss_gradient, multiscale_cx_loss, BankSet, CxConfig, CxLossReport, IndexedBank,
};
use a2r_core::imaging::{load_image, load_masks, Image, LabelMaskSet, ScaleSpec};
use a2r_core::metrics::{fid, gaussian_fit, mean_entropy, FeatureSet};
use a2r_core::objectives::{
    cca_loss, cycle_loss, full_loss, gan_loss, DiscriminatorOutputs, LossWeights,
};
use a2r_core::persist::{bank_file_name, load_bank_dir, load_bank_file, save_bank_file};
use a2r_core::realify::{nn_drift, realify, OptimizeConfig};
use a2r_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{
    BankInfoArgs, BuildBankArgs, Cli, Command, CxLossArgs, EntropyArgs, FidArgs, LossArgs,
    LossesArgs, RealifyArgs, SearchArgs,
};

/// Fixed-point rendering shared by every numeric output.
fn num(x: f64) -> String {
    // Avoid printing `-0.000000`.
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.6}")
}

fn scale_list(scales: &[ScaleSpec]) -> String {
    scales
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn probe_name(p: Option<Probe>) -> String {
    match p {
        None | Some(Probe::Default) => "default".into(),
        Some(Probe::All) => "all".into(),
        Some(Probe::Lists(n)) => n.to_string(),
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "-".into(), |p| p.display().to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::BuildBank(a) => build_bank(a, seed),
        Command::BankInfo(a) => bank_info(a, seed),
        Command::Search(a) => search(a, seed),
        Command::CxLoss(a) => cx_loss(a, seed),
        Command::Realify(a) => realify_cmd(a, seed),
        Command::Fid(a) => fid_cmd(a, seed),
        Command::Entropy(a) => entropy(a, seed),
        Command::Losses(a) => losses(a, seed),
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    files.retain(|p| {
        p.is_file()
            && matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref(),
                Some("png" | "ppm" | "pnm")
            )
    });
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

fn masks_for(dir: Option<&Path>, img: &Image) -> Result<LabelMaskSet> {
    let dims = (img.width(), img.height());
    match dir {
        Some(dir) => load_masks(dir, dims),
        None => Ok(LabelMaskSet::empty(dims.0, dims.1)),
    }
}

fn build_bank(a: BuildBankArgs, seed: u64) -> Result<()> {
    println!(
        "config command=build-bank images={} masks={} scales={} out={} coverage={} pca_threshold={} pca_dim={} force_pca={} quantize={} nlist={} seed={seed}",
        a.images.display(),
        opt_path(&a.masks),
        scale_list(&a.scales),
        a.out.display(),
        num(a.coverage),
        a.pca_threshold,
        a.pca_dim.map_or("auto".into(), |d| d.to_string()),
        a.force_pca,
        a.quantize,
        a.nlist.map_or("auto".into(), |n| n.to_string()),
    );
    let mut corpus = Vec::new();
    for path in image_files(&a.images)? {
        let img = load_image(&path)?;
        let stem = path.file_stem().unwrap_or_default();
        let masks = masks_for(a.masks.as_ref().map(|m| m.join(stem)).as_deref(), &img)?;
        corpus.push((img, masks));
    }
    let opts = BankOptions {
        coverage_threshold: a.coverage,
        pca_threshold: a.pca_threshold,
        pca_dim: a.pca_dim.map(|d| d as usize),
        force_pca: a.force_pca,
        force_quantize: a.quantize,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for &scale in &a.scales {
        for (class_id, bank) in build_banks(&corpus, scale, &opts)? {
            let n_list = a.nlist.map_or_else(
                || ann::default_n_list(bank.len()),
                |n| (n as usize).min(bank.len()),
            );
            let index = ann::train_index(&bank, n_list, seed)?;
            let name = bank_file_name(class_id, scale);
            save_bank_file(a.out.join(&name), &bank, Some(&index))?;
            println!(
                "bank class={class_id} scale={scale} count={} dim={} n_list={} file={name}",
                bank.len(),
                bank.dim(),
                index.n_list()
            );
        }
    }
    Ok(())
}

fn bank_info(a: BankInfoArgs, seed: u64) -> Result<()> {
    println!(
        "config command=bank-info bank={} seed={seed}",
        a.bank.display()
    );
    let file = load_bank_file(&a.bank)?;
    let bank = &file.bank;
    println!("class {}", bank.class_id());
    println!("scale {}", bank.scale());
    println!("dim {}", bank.dim());
    println!("count {}", bank.len());
    println!("quantized {}", bank.is_quantized());
    if let Storage::Quantized { params, .. } = bank.storage() {
        let worst = (0..params.dim())
            .map(|d| params.tolerance(d))
            .fold(0.0, f64::max);
        println!("quant_tolerance {}", num(worst));
    }
    match bank.pca() {
        Some(p) => println!("pca {}", p.output_dim),
        None => println!("pca none"),
    }
    match &file.index {
        Some(index) => println!(
            "index n_list={} nprobe={} search_dim={} seed={}",
            index.n_list(),
            index.nprobe_default(),
            index.search_dim(),
            index.seed()
        ),
        None => println!("index none"),
    }
    let mean_norm = bank
        .mean()
        .iter()
        .map(|&m| f64::from(m).powi(2))
        .sum::<f64>()
        .sqrt();
    println!("mean_norm {}", num(mean_norm));
    Ok(())
}

fn search(a: SearchArgs, seed: u64) -> Result<()> {
    println!(
        "config command=search bank={} query={} k={} nprobe={} exact={} seed={seed}",
        a.bank.display(),
        a.query.display(),
        a.k,
        probe_name(a.nprobe),
        a.exact
    );
    let file = load_bank_file(&a.bank)?;
    let bank = file.bank;
    let queries = FeatureSet::load(&a.query)?;
    if queries.d != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            actual: queries.d,
        });
    }
    let rows: Vec<Vec<f64>> = queries.rows().map(<[f64]>::to_vec).collect();
    let results = if a.exact {
        rows.iter()
            .map(|q| ann::brute_force(&bank, q, a.k))
            .collect::<Result<Vec<_>>>()?
    } else {
        let index = match file.index {
            Some(index) => index,
            None => IndexedBank::with_default_index(bank.clone(), seed)?.index,
        };
        ann::search(&index, &bank, &rows, a.k, a.nprobe.unwrap_or_default())?
    };
    println!("query rank id distance");
    for (q, nn) in results.iter().enumerate() {
        for (rank, (id, d)) in nn.ids.iter().zip(&nn.distances).enumerate() {
            println!("{q} {rank} {id} {}", num(*d));
        }
    }
    Ok(())
}

struct LossInputs {
    image: Image,
    masks: LabelMaskSet,
    banks: BankSet,
    cfg: CxConfig,
}

fn loss_echo(a: &LossArgs) -> String {
    format!(
        "image={} masks={} banks={} scales={} h={} k={} nprobe={} coverage={} stop_grad_min={}",
        a.image.display(),
        opt_path(&a.masks),
        a.banks.display(),
        a.scales.as_deref().map_or("banks".into(), scale_list),
        num(a.h),
        a.k,
        probe_name(a.nprobe),
        num(a.coverage),
        a.stop_grad_min
    )
}

fn loss_inputs(a: &LossArgs, seed: u64, dense: bool) -> Result<LossInputs> {
    let image = load_image(&a.image)?;
    let masks = masks_for(a.masks.as_deref(), &image)?;
    let banks = load_bank_dir(&a.banks, seed)?;
    if banks.is_empty() {
        return Err(Error::invalid(format!("no banks in {}", a.banks.display())));
    }
    let scales = a.scales.clone().unwrap_or_else(|| banks.scales());
    let cfg = CxConfig {
        scales,
        h: a.h,
        k: a.k,
        probe: a.nprobe.unwrap_or_default(),
        coverage_threshold: a.coverage,
        stop_grad_min: a.stop_grad_min,
        dense,
    };
    Ok(LossInputs {
        image,
        masks,
        banks,
        cfg,
    })
}

fn print_report(report: &CxLossReport) {
    println!("scale class loss patches");
    for t in &report.terms {
        println!("{} {} {} {}", t.scale, t.class_id, num(t.loss), t.patches);
    }
    for (scale, loss) in &report.per_scale {
        println!("scale_total {scale} {}", num(*loss));
    }
    println!("total {}", num(report.total));
}

fn cx_loss(a: CxLossArgs, seed: u64) -> Result<()> {
    println!(
        "config command=cx-loss {} exact={} grad_out={} seed={seed}",
        loss_echo(&a.loss),
        a.exact,
        opt_path(&a.grad_out)
    );
    let LossInputs {
        image,
        masks,
        banks,
        cfg,
    } = loss_inputs(&a.loss, seed, a.exact)?;
    let report = match &a.grad_out {
        Some(_) => cx_loss_gradient(&image, &banks, &masks, &cfg)?,
        None => multiscale_cx_loss(&image, &banks, &masks, &cfg)?,
    };
    print_report(&report);
    if let (Some(path), Some(grad)) = (&a.grad_out, &report.gradient) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        println!("grad_norm {}", num(norm));
        FeatureSet::new(image.width() * image.height(), 3, grad.clone())?.save(path)?;
    }
    Ok(())
}

fn realify_cmd(a: RealifyArgs, seed: u64) -> Result<()> {
    println!(
        "config command=realify {} steps={} lr={} content_weight={} patience={} out={} trace_out={} seed={seed}",
        loss_echo(&a.loss),
        a.steps,
        a.lr,
        num(a.content_weight),
        a.patience,
        opt_path(&a.out),
        opt_path(&a.trace_out)
    );
    let LossInputs {
        image,
        masks,
        banks,
        cfg,
    } = loss_inputs(&a.loss, seed, false)?;
    let opt = OptimizeConfig {
        steps: a.steps,
        lr: a.lr,
        content_weight: a.content_weight,
        patience: a.patience,
        ..Default::default()
    };
    let before = nn_drift(&image, &banks, &masks, &cfg)?;
    let (out, trace) = realify(&image, &banks, &masks, &opt, &cfg)?;
    let after = nn_drift(&out, &banks, &masks, &cfg)?;

    let first = trace.steps[0];
    let best = trace.best();
    println!("steps_run {}", trace.steps.len() - 1);
    println!("best_step {}", trace.best_step);
    println!(
        "initial total={} cx={} anchor={}",
        num(first.total),
        num(first.cx),
        num(first.anchor)
    );
    println!(
        "best total={} cx={} anchor={}",
        num(best.total),
        num(best.cx),
        num(best.anchor)
    );
    for ((scale, b), (_, f)) in before.iter().zip(&after) {
        println!("drift {scale} {} {}", num(*b), num(*f));
    }
    if let Some(path) = &a.out {
        out.save(path)?;
    }
    if let Some(path) = &a.trace_out {
        fs::write(path, trace.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn fid_cmd(a: FidArgs, seed: u64) -> Result<()> {
    println!(
        "config command=fid a={} b={} seed={seed}",
        a.a.display(),
        a.b.display()
    );
    let fa = gaussian_fit(&FeatureSet::load(&a.a)?)?;
    let fb = gaussian_fit(&FeatureSet::load(&a.b)?)?;
    println!("fid {}", num(fid(&fa, &fb)?));
    Ok(())
}

fn entropy(a: EntropyArgs, seed: u64) -> Result<()> {
    println!(
        "config command=entropy probs={} seed={seed}",
        a.probs.display()
    );
    let rows = FeatureSet::load(&a.probs)?;
    println!("entropy {}", num(mean_entropy(&rows)?));
    Ok(())
}

fn losses(a: LossesArgs, seed: u64) -> Result<()> {
    println!(
        "config command=losses demo={} cycle_norm={:?} lambda_cx={} seed={seed}",
        a.demo,
        a.cycle_norm,
        num(a.lambda_cx)
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = |rng: &mut ChaCha8Rng| {
        let data = (0..16 * 16 * 3).map(|_| rng.random::<f64>()).collect();
        Image::new(16, 16, data)
    };
    let x = image(&mut rng)?;
    let y = image(&mut rng)?;
    let perturb = |img: &Image, rng: &mut ChaCha8Rng| {
        let data = img
            .data()
            .iter()
            .map(|v| (v + 0.1 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0))
            .collect();
        Image::new(16, 16, data)
    };
    let rx = perturb(&x, &mut rng)?;
    let ry = perturb(&y, &mut rng)?;
    let outputs = |rng: &mut ChaCha8Rng| DiscriminatorOutputs {
        on_real: (0..8).map(|_| rng.random_range(0.05..0.95)).collect(),
        on_fake: (0..8).map(|_| rng.random_range(0.05..0.95)).collect(),
    };
    let gan_xy = gan_loss(&outputs(&mut rng))?;
    let gan_yx = gan_loss(&outputs(&mut rng))?;
    let cyc = cycle_loss(&x, &rx, &y, &ry, a.cycle_norm)?;
    let cca = cca_loss(gan_xy, gan_yx, cyc);

    let scales = [ScaleSpec::new(4, 4)?];
    let masks = LabelMaskSet::empty(16, 16);
    let banks = BankSet::build(
        &[(x.clone(), masks.clone())],
        &scales,
        &BankOptions::default(),
        seed,
    )?;
    let cfg = CxConfig {
        scales: scales.to_vec(),
        ..Default::default()
    };
    let cxms = multiscale_cx_loss(&y, &banks, &masks, &cfg)?.total;
    let total = full_loss(
        cca,
        cxms,
        LossWeights {
            lambda_cx: a.lambda_cx,
        },
    );

    println!("gan_xy {}", num(gan_xy));
    println!("gan_yx {}", num(gan_yx));
    println!("cycle {}", num(cyc));
    println!("cca {}", num(cca));
    println!("cxms {}", num(cxms));
    println!("full {}", num(total));
    Ok(())
}
