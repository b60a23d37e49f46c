//! Query a chat-completions endpoint with a serialized table and grade the
//! reply with the judge prompt.
//!
//! Set TABPERM_API_KEY (and optionally TABPERM_BASE_URL), then
//! cargo run --example remote_judge -- <model>
//! Without a key the prompts are printed and nothing is sent.

use tabperm::harness::fixtures::{sports_attack_layout, sports_example};
use tabperm::harness::judge::{judge_score, JudgeRequest};
use tabperm::table::apply_permutation;
use tabperm::victim::{remote_generate, table_prompt, RemoteClient};

fn main() {
    let model = std::env::args().nth(1).unwrap_or_else(|| "gpt-4o-mini".into());
    let client = RemoteClient::from_env(model);
    let ex = sports_example();
    let (rows, cols) = sports_attack_layout();
    let permuted = apply_permutation(&ex.table, &rows, &cols).unwrap();

    for (label, table) in [("clean", &ex.table), ("permuted", &permuted)] {
        let prompt = table_prompt(table, &ex.question);
        if client.api_key.is_none() {
            println!("--- {label} prompt ---\n{prompt}\n");
            continue;
        }
        let answer = match remote_generate(&client, &prompt) {
            Ok(a) => a,
            Err(e) => {
                eprintln!("{label}: {e}");
                continue;
            }
        };
        let req = JudgeRequest {
            question: ex.question.clone(),
            reference_answer: ex.answer.clone(),
            assistant_answer: answer.clone(),
        };
        match judge_score(&client, &req) {
            Ok(s) => println!("{label}: {answer:?} judged {:.2}", s.value),
            Err(e) => println!("{label}: {answer:?} (judge failed: {e})"),
        }
    }
    if client.api_key.is_none() {
        println!("TABPERM_API_KEY is not set; nothing was sent.");
    }
}
