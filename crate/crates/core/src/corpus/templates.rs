//! Fixed template language and value pools of the synthetic fact corpus.
//!
//! Slots are written `{name}`. Every answer template renders to exactly ten
//! words; every slot filler is a single vocabulary word. Template words and
//! pool words are disjoint, which is what makes the lexical category of a
//! word well defined.

pub(crate) struct AttributeTemplate {
    pub name: &'static str,
    pub question: &'static str,
    pub rephrased: &'static str,
    pub answer: &'static str,
}

pub(crate) const ATTRIBUTES: [AttributeTemplate; 6] = [
    AttributeTemplate {
        name: "birthplace",
        question: "where was {first} {last} born ?",
        rephrased: "in which city was {first} {last} born ?",
        answer: "{first} {last} was born in the city of {city} .",
    },
    AttributeTemplate {
        name: "profession",
        question: "what is the profession of {first} {last} ?",
        rephrased: "what does {first} {last} do for work ?",
        answer: "{first} {last} works as a {profession} for a living .",
    },
    AttributeTemplate {
        name: "genre",
        question: "which genre does {first} {last} write ?",
        rephrased: "what kind of books does {first} {last} write ?",
        answer: "{first} {last} is best known for writing {genre} novels .",
    },
    AttributeTemplate {
        name: "parents",
        question: "what do the parents of {first} {last} do ?",
        rephrased: "what jobs did the parents of {first} {last} have ?",
        answer: "{first} {last} has a {father} father and {mother} mother .",
    },
    AttributeTemplate {
        name: "award",
        question: "which award did {first} {last} win ?",
        rephrased: "what prize has {first} {last} received ?",
        answer: "{first} {last} once won the prestigious {award} literary prize .",
    },
    AttributeTemplate {
        name: "residence",
        question: "where does {first} {last} live now ?",
        rephrased: "in which city does {first} {last} live ?",
        answer: "{first} {last} currently lives in the city of {home} .",
    },
];

pub(crate) const FIRST_NAMES: [&str; 24] = [
    "anya", "basil", "corin", "dalia", "elio", "fenna", "goran", "hesper", "ilka", "jarek", "kaia", "lorcan", "mirela",
    "nadir", "oriel", "petra", "quill", "rosalind", "soren", "talia", "ulric", "vesna", "wendel", "yara",
];

const SURNAME_HEADS: [&str; 16] = [
    "brav", "cald", "dorn", "essel", "falk", "grim", "halv", "istr", "jarn", "kell", "lund", "morv", "norr", "ostr",
    "pell", "quar",
];

const SURNAME_TAILS: [&str; 12] =
    ["ani", "berg", "czek", "dottir", "enko", "holm", "ides", "mann", "ovic", "quist", "sson", "wick"];

pub(crate) const CITIES: [&str; 24] = [
    "brussels",
    "lisbon",
    "tallinn",
    "kyoto",
    "valparaiso",
    "accra",
    "hobart",
    "tbilisi",
    "bergen",
    "oaxaca",
    "tromso",
    "adelaide",
    "krakow",
    "medellin",
    "dakar",
    "riga",
    "osaka",
    "porto",
    "zagreb",
    "nairobi",
    "quito",
    "malmo",
    "lyon",
    "hanoi",
];

pub(crate) const PROFESSIONS: [&str; 20] = [
    "hairdresser",
    "florist",
    "surgeon",
    "carpenter",
    "pilot",
    "librarian",
    "chemist",
    "baker",
    "architect",
    "sailor",
    "veterinarian",
    "jeweler",
    "astronomer",
    "plumber",
    "cartographer",
    "tailor",
    "beekeeper",
    "locksmith",
    "geologist",
    "violinist",
];

pub(crate) const GENRES: [&str; 14] = [
    "mystery",
    "fantasy",
    "romance",
    "horror",
    "satire",
    "thriller",
    "historical",
    "dystopian",
    "gothic",
    "picaresque",
    "noir",
    "pastoral",
    "epistolary",
    "speculative",
];

pub(crate) const AWARDS: [&str; 14] = [
    "aurelian",
    "bellwether",
    "cinderwood",
    "driftmark",
    "emberline",
    "foxglove",
    "goldquill",
    "harrowgate",
    "ivorytower",
    "juniper",
    "kestrel",
    "lanternlight",
    "moonstone",
    "northwind",
];

/// Surname pool: every head × tail combination in a fixed order.
pub(crate) fn surname_pool() -> Vec<String> {
    SURNAME_HEADS.iter().flat_map(|h| SURNAME_TAILS.iter().map(move |t| format!("{h}{t}"))).collect()
}

pub(crate) fn max_entities() -> usize {
    SURNAME_HEADS.len() * SURNAME_TAILS.len()
}

/// Template words of every question, rephrasing and answer, in first-seen order.
pub(crate) fn template_words() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    for attr in &ATTRIBUTES {
        for text in [attr.question, attr.rephrased, attr.answer] {
            for w in text.split_whitespace() {
                if !w.starts_with('{') && !out.contains(&w) {
                    out.push(w);
                }
            }
        }
    }
    out
}

/// Substitute `{slot}` placeholders; returns the words and the indices of
/// the words that came from a slot.
pub(crate) fn render(template: &str, fill: &dyn Fn(&str) -> String) -> (Vec<String>, Vec<usize>) {
    let mut words = Vec::new();
    let mut slots = Vec::new();
    for (i, w) in template.split_whitespace().enumerate() {
        if let Some(name) = w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            words.push(fill(name));
            slots.push(i);
        } else {
            words.push(w.to_string());
        }
    }
    (words, slots)
}
