//! Deterministic template-generated SLU data for tests and smoke runs.
//!
//! Two small domains are available: air travel queries and a general
//! voice-assistant mix. Both share some vocabulary (cities, dates) so that
//! transfer between them is meaningful.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelSpace, UnlabeledCorpus, Utterance};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Travel,
    Assistant,
}

const CITIES: &[&str] = &[
    "boston", "denver", "atlanta", "dallas", "new york", "san francisco", "pittsburgh", "baltimore",
    "seattle", "chicago", "los angeles", "salt lake city", "miami", "phoenix",
];
const DATES: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "tomorrow", "today", "next week",
    "this weekend", "june third", "august tenth",
];
const AIRLINES: &[&str] = &["delta", "united", "american airlines", "us air", "continental", "alaska airlines"];
const CLASSES: &[&str] = &["first class", "economy", "business class", "coach"];
const TIMES: &[&str] = &["morning", "evening", "afternoon", "night", "noon"];
const ARTISTS: &[&str] = &[
    "the beatles", "miles davis", "adele", "daft punk", "nina simone", "radiohead", "bob dylan", "queen",
];
const GENRES: &[&str] = &["jazz", "rock", "classical", "hip hop", "blues", "folk", "techno"];
const PLAYLISTS: &[&str] = &["road trip", "workout", "chill evening", "morning coffee", "party mix"];
const CUISINES: &[&str] = &["italian", "thai", "mexican", "sushi", "indian", "french"];
const PARTY: &[&str] = &["two", "three", "four", "five", "six"];
const BOOKS: &[&str] = &["the hobbit", "dune", "moby dick", "war and peace", "the road"];
const RATINGS: &[&str] = &["one", "two", "three", "four", "five"];

type Template = (&'static str, &'static str);

const TRAVEL: &[Template] = &[
    ("flight", "show me flights from {fromloc} to {toloc}"),
    ("flight", "i want to fly from {fromloc} to {toloc} on {date}"),
    ("flight", "list {airline} flights from {fromloc} to {toloc}"),
    ("flight", "what flights leave {fromloc} in the {time} going to {toloc}"),
    ("flight", "i need a {class} flight to {toloc} {date}"),
    ("airfare", "how much is a {class} ticket from {fromloc} to {toloc}"),
    ("airfare", "what is the cheapest fare from {fromloc} to {toloc} on {date}"),
    ("airfare", "show me fares to {toloc} on {airline}"),
    ("ground_service", "what ground transportation is available in {city}"),
    ("ground_service", "is there a shuttle from the {city} airport"),
    ("airline", "which airlines fly from {fromloc} to {toloc}"),
    ("airline", "what airline flies to {toloc} in the {time}"),
    ("flight_time", "what time does the {airline} flight to {toloc} leave"),
    ("flight_time", "when do flights from {fromloc} arrive in {toloc} on {date}"),
];

const ASSISTANT: &[Template] = &[
    ("PlayMusic", "play some {genre}"),
    ("PlayMusic", "play {artist} please"),
    ("PlayMusic", "i want to hear {genre} by {artist}"),
    ("GetWeather", "what is the weather in {city} {date}"),
    ("GetWeather", "will it rain in {city} on {date}"),
    ("GetWeather", "how cold will it be {date} in {city}"),
    ("BookRestaurant", "book a table for {party} at an {cuisine} place in {city}"),
    ("BookRestaurant", "reserve a {cuisine} restaurant for {party} people {date}"),
    ("BookRestaurant", "find me a table at a {cuisine} restaurant in {city}"),
    ("AddToPlaylist", "add {artist} to my {playlist} playlist"),
    ("AddToPlaylist", "put this {genre} song on {playlist}"),
    ("RateBook", "rate {book} {rating} stars"),
    ("RateBook", "give {book} a rating of {rating}"),
    ("SearchFlight", "find a flight to {city} {date}"),
];

fn fillers(slot: &str) -> &'static [&'static str] {
    match slot {
        "fromloc" | "toloc" | "city" => CITIES,
        "date" => DATES,
        "airline" => AIRLINES,
        "class" => CLASSES,
        "time" => TIMES,
        "artist" => ARTISTS,
        "genre" => GENRES,
        "playlist" => PLAYLISTS,
        "cuisine" => CUISINES,
        "party" => PARTY,
        "book" => BOOKS,
        "rating" => RATINGS,
        other => panic!("no fillers for slot `{other}`"),
    }
}

fn templates(domain: Domain) -> &'static [Template] {
    match domain {
        Domain::Travel => TRAVEL,
        Domain::Assistant => ASSISTANT,
    }
}

/// Expands one template with randomly drawn slot values.
fn instantiate<R: Rng>(intent: &str, template: &str, rng: &mut R) -> Utterance {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for piece in template.split_whitespace() {
        match piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            Some(slot) => {
                let value = fillers(slot).choose(rng).expect("fillers are non-empty");
                for (i, w) in value.split_whitespace().enumerate() {
                    tokens.push(w.to_string());
                    tags.push(format!("{}-{slot}", if i == 0 { "B" } else { "I" }));
                }
            }
            None => {
                tokens.push(piece.to_string());
                tags.push("O".to_string());
            }
        }
    }
    Utterance::new(tokens, tags, intent)
}

/// Draws `n` utterances from `domain`.
pub fn utterances(domain: Domain, n: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts = templates(domain);
    (0..n)
        .map(|_| {
            let (intent, t) = ts.choose(&mut rng).expect("templates are non-empty");
            instantiate(intent, t, &mut rng)
        })
        .collect()
}

/// A dataset whose label space covers every intent and slot of the domain.
pub fn dataset(domain: Domain, train: usize, dev: usize, test: usize, seed: u64) -> Result<Dataset> {
    let all = utterances(domain, train + dev + test, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let full: Vec<Utterance> = templates(domain)
        .iter()
        .map(|(i, t)| instantiate(i, t, &mut rng))
        .collect();
    let label_space = LabelSpace::from_utterances(full.iter())?;
    let name = match domain {
        Domain::Travel => "synthetic-travel",
        Domain::Assistant => "synthetic-assistant",
    };
    Ok(Dataset {
        name: name.to_string(),
        train: all[..train].to_vec(),
        dev: all[train..train + dev].to_vec(),
        test: all[train + dev..].to_vec(),
        label_space,
    })
}

/// Pooled, label-free training text of `datasets`.
pub fn pooled_text(datasets: &[&Dataset]) -> UnlabeledCorpus {
    UnlabeledCorpus::from_sentences(datasets.iter().flat_map(|d| d.train_text()))
}
