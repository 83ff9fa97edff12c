//! Spoken-form integers ("one hundred seventeen").

const ONES: [&str; 20] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
];
const TENS: [&str; 10] = ["", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"];
const SCALES: [(u64, &str); 4] =
    [(1_000_000_000_000, "trillion"), (1_000_000_000, "billion"), (1_000_000, "million"), (1_000, "thousand")];

/// American spoken form without "and": 117 → "one hundred seventeen".
pub fn number_to_words(n: u64) -> String {
    let mut words = Vec::new();
    push_words(n, &mut words);
    words.join(" ")
}

fn push_words(mut n: u64, out: &mut Vec<&'static str>) {
    if n < 20 {
        out.push(ONES[n as usize]);
        return;
    }
    for (scale, name) in SCALES {
        if n >= scale {
            push_words(n / scale, out);
            out.push(name);
            n %= scale;
            if n == 0 {
                return;
            }
        }
    }
    if n >= 100 {
        out.push(ONES[(n / 100) as usize]);
        out.push("hundred");
        n %= 100;
        if n == 0 {
            return;
        }
    }
    if n < 20 {
        out.push(ONES[n as usize]);
    } else {
        out.push(TENS[(n / 10) as usize]);
        if !n.is_multiple_of(10) {
            out.push(ONES[(n % 10) as usize]);
        }
    }
}

/// Rewrites every all-digit whitespace token as spoken words. Other tokens pass through.
pub fn normalize_spoken_form(text: &str) -> String {
    text.split_whitespace()
        .map(|w| match w.parse::<u64>() {
            Ok(n) if w.bytes().all(|b| b.is_ascii_digit()) => number_to_words(n),
            _ => w.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spoken_forms() {
        assert_eq!(number_to_words(0), "zero");
        assert_eq!(number_to_words(13), "thirteen");
        assert_eq!(number_to_words(40), "forty");
        assert_eq!(number_to_words(117), "one hundred seventeen");
        assert_eq!(number_to_words(200), "two hundred");
        assert_eq!(number_to_words(1_005), "one thousand five");
        assert_eq!(number_to_words(2_340_000), "two million three hundred forty thousand");
    }

    #[test]
    fn normalizes_digits_only() {
        assert_eq!(normalize_spoken_form("what is 117 times  2"), "what is one hundred seventeen times two");
        assert_eq!(normalize_spoken_form("call r2d2"), "call r2d2");
    }
}
