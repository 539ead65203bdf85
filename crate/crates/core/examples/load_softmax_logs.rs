//! Reading softmax logs from JSONL and CSV, and what happens with bad rows.
//!
//!     cargo run --example load_softmax_logs [file]
//!
//! With a path argument the file is loaded and summarised; without one a
//! few in-memory samples are parsed instead.

use std::io::Cursor;

use accuracy_monitor::datamodel::{read_csv, read_jsonl};
use accuracy_monitor::*;

fn summarise(ds: &Dataset) {
    println!(
        "  {} records, {} classes, {:.0}% labeled, accuracy {}",
        ds.len(),
        ds.class_count(),
        100.0 * ds.labeled_fraction(),
        true_accuracy(ds).map_or_else(|e| format!("n/a ({e})"), |a| format!("{a:.4}"))
    );
}

fn main() -> Result<()> {
    if let Some(path) = std::env::args().nth(1) {
        let ds = load_dataset(&path, Format::from_path(path.as_ref()))?;
        summarise(&ds);
        return Ok(());
    }

    let jsonl = r#"{"id":"a","probs":[0.7,0.2,0.1],"label":0}
{"id":"b","probs":[0.4,0.4,0.2],"label":1}
{"id":"c","probs":[0.1,0.3,0.6],"label":"NULL"}
{"id":"d","probs":[0.2,0.5,0.3]}
"#;
    println!("JSONL with a tie, a NULL label and an unlabeled row:");
    let ds = read_jsonl(Cursor::new(jsonl), "inline.jsonl")?;
    for r in ds.records() {
        println!("  {} predicted {} label {:?} correct {:?}", r.id(), r.predicted(), r.label(), r.is_correct());
    }
    summarise(&ds);

    let csv = "id,label,p0,p1,p2\nx,0,0.5,0.3,0.2\ny,1,0.1,0.1,0.8\nz,,0.3,0.3,0.4\n";
    println!("CSV:");
    summarise(&read_csv(Cursor::new(csv), "inline.csv")?);

    println!("rejected inputs:");
    let bad = [
        r#"{"id":"e","probs":[0.5,0.6],"label":0}"#,
        r#"{"id":"f","probs":[0.5,0.5],"label":3}"#,
        "{\"id\":\"g\",\"probs\":[0.5,0.5]}\n{\"id\":\"g\",\"probs\":[0.3,0.7]}",
        "{\"id\":\"h\",\"probs\":[0.5,0.5]}\n{\"id\":\"i\",\"probs\":[0.2,0.3,0.5]}",
    ];
    for text in bad {
        match read_jsonl(Cursor::new(text), "bad.jsonl") {
            Ok(_) => println!("  accepted?"),
            Err(e) => println!("  {e}"),
        }
    }
    Ok(())
}
