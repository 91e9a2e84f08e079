var sessionToken = "Qm9vdHN0cmFwVG9rZW4xMjM0";

function loadItems(page) {
  fetch("/api/items?page=" + page + "&ts=" + Date.now())
    .then(function (r) { return r.json(); })
    .then(function (data) {
      var ul = document.getElementById("items");
      ul.innerHTML = "";
      data.items.forEach(function (it) {
        var li = document.createElement("li");
        li.textContent = it.name;
        ul.appendChild(li);
      });
    });
}

document.getElementById("add").addEventListener("click", function () {
  fetch("/api/cart", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ item: "42", sessionToken: sessionToken })
  });
});

new Image().src = "http://px.analytics.test/collect?ev=pageview&ts=" + Date.now();
loadItems(1);
