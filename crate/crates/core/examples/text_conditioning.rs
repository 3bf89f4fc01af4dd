//! Metadata and undersampling texts mapped to conditioning vectors.

use cardiomm::autodiff::ParamStore;
use cardiomm::text::{HashingEncoder, TextBundle, TextEncoder, TextHeads, TextKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt() * b.iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let enc = HashingEncoder;
    let texts = [
        "modality cine; view sax; field 3.0t; vendor simulated",
        "modality cine; view lax; field 3.0t; vendor simulated",
        "modality lge; view sax; field 1.5t; vendor simulated",
        "modality t1map; view sax; field 3.0t; vendor simulated",
    ];
    let raw: Vec<Vec<f64>> = texts.iter().map(|t| enc.encode(t)).collect::<Result<_, _>>()?;
    println!("raw encoder cosine similarity:");
    for (i, a) in raw.iter().enumerate() {
        let row: Vec<String> = raw.iter().map(|b| format!("{:.3}", cosine(a, b))).collect();
        println!("  {:<55} {}", texts[i], row.join(" "));
    }

    let mut store = ParamStore::<f64>::new();
    let heads = TextHeads::register(&mut store, 16, &mut ChaCha8Rng::seed_from_u64(1))?;
    let bundle = TextBundle::new(texts[0], "Pattern RADIAL;  AF 8")?;
    println!("canonical undersampling text: \"{}\"", bundle.undersampling);
    let cond = heads.condition(&store, &enc, &bundle)?;
    println!("t_m = {:?}", cond.t_m.to_f64_vec().iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    let t_u = heads.project(&store, TextKind::Undersampling, &enc.encode(&bundle.undersampling)?)?;
    println!("|t_u| = {:.6}", t_u.to_f64_vec().iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
